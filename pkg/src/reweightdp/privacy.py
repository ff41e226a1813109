"""Renyi-DP accounting for the Gaussian mechanism.

The ledger composes per-step RDP guarantees additively at every order on a
fixed alpha grid and converts to (eps, delta)-DP by taking the best order.
No subsampling amplification is applied, so the reported epsilon is an upper
bound for both shuffled-partition and independently sampled batches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CalibrationError, ContractError, DomainError

DEFAULT_ALPHAS = (1.25, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


def gaussian_rdp_eps(sigma: float, sensitivity: float, alpha: float) -> float:
    """Smallest RDP epsilon of a Gaussian mechanism: ``alpha * sens^2 / (2 sigma^2)``."""
    if not alpha > 1:
        raise DomainError(f"alpha must exceed 1, got {alpha}")
    if sigma < 0 or sensitivity < 0:
        raise DomainError("sigma and sensitivity must be non-negative")
    if sigma == 0:
        return math.inf if sensitivity > 0 else 0.0
    return alpha * sensitivity ** 2 / (2.0 * sigma ** 2)


@dataclass
class NoiseSpec:
    """Noise level for releasing the mean of ``tau`` gradients clipped to ``c``."""

    sigma: float
    c: float
    tau: int

    def __post_init__(self):
        if self.sigma < 0 or not self.c > 0 or self.tau < 1:
            raise DomainError(f"invalid noise spec {self}")

    @property
    def sensitivity(self) -> float:
        return self.c / self.tau


@dataclass
class RdpLedger:
    alphas: tuple = DEFAULT_ALPHAS
    eps_acc: np.ndarray = None
    steps: int = 0
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas or any(a <= 1 for a in self.alphas):
            raise DomainError(f"all alphas must exceed 1, got {self.alphas}")
        if self.eps_acc is None:
            self.eps_acc = np.zeros(len(self.alphas))
        self.eps_acc = np.asarray(self.eps_acc, dtype=np.float64)

    def snapshot(self) -> "RdpLedger":
        return RdpLedger(self.alphas, self.eps_acc.copy(), self.steps)

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.alphas, self.eps_acc.tolist()))


def compose(ledger: RdpLedger, step_eps, alphas: Sequence[float] | None = None) -> RdpLedger:
    """Add one mechanism's per-order epsilons to the ledger (in place; also returned).

    ``step_eps`` is a sequence aligned with ``ledger.alphas`` or a mapping
    alpha -> eps covering exactly the ledger's grid.
    """
    if isinstance(step_eps, dict):
        if set(map(float, step_eps)) != set(ledger.alphas):
            raise ContractError(f"alpha grid mismatch: {sorted(step_eps)} vs {ledger.alphas}")
        step = np.array([step_eps[a] for a in ledger.alphas], dtype=np.float64)
    else:
        if alphas is not None and tuple(map(float, alphas)) != ledger.alphas:
            raise ContractError(f"alpha grid mismatch: {tuple(alphas)} vs {ledger.alphas}")
        step = np.asarray(step_eps, dtype=np.float64)
        if step.shape != (len(ledger.alphas),):
            raise ContractError(f"expected {len(ledger.alphas)} epsilons, got {step.shape}")
    if np.any(step < 0):
        raise DomainError("step epsilons must be non-negative")
    ledger.eps_acc = ledger.eps_acc + step
    ledger.steps += 1
    return ledger


def gaussian_step(ledger: RdpLedger, sigma: float, sensitivity: float,
                  eps_fn: Callable[[float, float, float], float] = gaussian_rdp_eps) -> RdpLedger:
    """Compose one Gaussian release; ``eps_fn`` may be swapped for an amplified bound."""
    return compose(ledger, [eps_fn(sigma, sensitivity, a) for a in ledger.alphas])


def to_dp(ledger: RdpLedger, delta: float) -> tuple[float, float]:
    """Best ``(eps', alpha)`` over the grid with ``eps' = eps(alpha) + ln(1/delta)/(alpha-1)``.

    Ties resolve to the smaller alpha.
    """
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    log_inv = -math.log(delta)
    best, best_alpha = math.inf, ledger.alphas[0]
    for a, e in sorted(zip(ledger.alphas, ledger.eps_acc)):
        cand = float(e) + log_inv / (a - 1.0)
        if cand < best:
            best, best_alpha = cand, a
    return best, best_alpha


def calibrate_sigma(target_eps: float, target_delta: float, steps: int, sensitivity: float,
                    alpha_grid: Sequence[float] = DEFAULT_ALPHAS, sigma_min: float = 1e-3,
                    sigma_max: float = 1e6, rtol: float = 1e-4) -> float:
    """Smallest sigma (to relative ``rtol``) whose ``steps``-fold composition meets the target."""
    if not target_eps > 0:
        raise DomainError(f"target epsilon must be positive, got {target_eps}")
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    alpha_grid = tuple(alpha_grid)

    def eps_at(sigma):
        ledger = RdpLedger(alpha_grid)
        per = np.array([gaussian_rdp_eps(sigma, sensitivity, a) for a in alpha_grid])
        ledger.eps_acc = per * steps
        ledger.steps = steps
        return to_dp(ledger, target_delta)[0]

    if eps_at(sigma_max) > target_eps:
        raise CalibrationError(f"target eps={target_eps} unattainable with sigma <= {sigma_max}")
    if eps_at(sigma_min) <= target_eps:
        return sigma_min
    lo, hi = sigma_min, sigma_max
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def add_noise(grad: dict[str, np.ndarray], sigma: float, rng_seed=None) -> dict[str, np.ndarray]:
    """Add i.i.d. N(0, sigma^2) to every coordinate.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.  Parameters
    are visited in sorted-name order so the draw is independent of dict order.
    """
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return {k: v.copy() for k, v in grad.items()}
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    noisy = {}
    for k in sorted(grad):
        v = grad[k]
        noisy[k] = v + rng.normal(0.0, sigma, size=v.shape)
    return {k: noisy[k] for k in grad}


def privacy_report(ledger: RdpLedger, sigma: float, c: float, tau: int, delta: float) -> dict:
    eps_prime, best_alpha = to_dp(ledger, delta)
    return {
        "steps": ledger.steps,
        "sigma": sigma,
        "c": c,
        "tau": tau,
        "per_alpha_eps": {repr(a): e for a, e in ledger.as_dict().items()},
        "final": {"eps_prime": eps_prime, "delta": delta, "best_alpha": best_alpha},
    }


def write_privacy_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, allow_nan=True)
