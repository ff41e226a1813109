"""Differentially private training loop with SGD or Adam updates."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tape
from .clipping import STRATEGIES, ClipConfig, clipped_batch_gradient
from .data import Dataset, batches
from .errors import ContractError, DomainError
from .layers.base import Model
from .privacy import DEFAULT_ALPHAS, RdpLedger, add_noise, calibrate_sigma, gaussian_step, to_dp

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    clip: float = 1.0
    sigma: float = 0.05
    lr: float = 0.001
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    method: str = "reweight"
    seed: int = 0
    # "std": sigma is the noise std on the averaged gradient; "multiplier":
    # the std is sigma * clip / batch_size
    noise_mode: str = "std"
    per_layer: bool = False
    delta: float = 1e-5
    target_eps: float | None = None
    alphas: tuple = DEFAULT_ALPHAS

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0 or not self.clip > 0 or self.sigma < 0 or self.epochs < 0:
            raise DomainError("need lr >= 0, clip > 0, sigma >= 0, epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.method not in STRATEGIES:
            raise ContractError(f"unknown method {self.method!r}")
        if self.noise_mode not in ("std", "multiplier"):
            raise ContractError(f"unknown noise mode {self.noise_mode!r}")
        self.alphas = tuple(self.alphas)

    @property
    def private(self) -> bool:
        return self.method != "nonprivate"

    def noise_std(self) -> float:
        if self.noise_mode == "multiplier":
            return self.sigma * self.clip / self.batch_size
        return self.sigma

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def apply_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 config: TrainConfig, state: OptimizerState) -> None:
    """In-place SGD or Adam step on ``params``."""
    state.step += 1
    if config.optimizer == "sgd":
        for k, p in params.items():
            p -= config.lr * grads[k]
        return
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k], state.v[k] = np.zeros_like(p), np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps_hat), with few temporaries
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(c2)
        denom += config.eps_hat
        step = np.divide(m, denom, out=denom)
        step *= config.lr / c1
        p -= step


def train_step(model: Model, x, y, config: TrainConfig, ledger: RdpLedger | None = None,
               state: OptimizerState | None = None,
               rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """One step: clipped mean gradient, Gaussian noise, optimizer update.

    Returns the noisy gradient that was applied.  The ledger (when given) is
    charged one Gaussian release with sensitivity ``clip / batch_size`` for
    every private step.
    """
    state = state if state is not None else OptimizerState()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    clip_cfg = ClipConfig(config.clip, config.method, config.per_layer)
    grad = clipped_batch_gradient(model, x, y, clip_cfg)
    if config.private:
        std = config.noise_std()
        grad = add_noise(grad, std, rng)
        if ledger is not None:
            gaussian_step(ledger, std, config.clip / len(y))
    apply_update(model.parameters(), grad, config, state)
    return grad


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Accuracy and mean loss; forward only, nothing cached, no privacy cost."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    for x, y in batches(dataset, batch_size, drop_last=False):
        tape = Tape()
        logits = model.logits(tape, x, cache=False)
        z = logits.value
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss += float(-logp[np.arange(len(y)), y].sum())
        correct += int((z.argmax(axis=1) == y).sum())
    return correct / len(dataset), total_loss / len(dataset)


@dataclass
class EpochMetrics:
    epoch: int
    wall_seconds: float
    loss: float
    accuracy: float
    eps_prime: float


def train(model: Model, dataset: Dataset, config: TrainConfig, metrics_csv=None,
          eval_set: Dataset | None = None):
    """Run ``config.epochs`` epochs of shuffled, partitioned minibatch training.

    Returns ``(model, ledger, metrics)``.  If ``config.target_eps`` is set the
    noise level is calibrated up front for the total number of steps.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if config.batch_size > len(dataset):
        raise ContractError(f"batch size {config.batch_size} exceeds dataset size {len(dataset)}")
    if config.target_eps is not None and config.private:
        steps = config.epochs * (len(dataset) // config.batch_size)
        sens = config.clip / config.batch_size
        config.sigma = calibrate_sigma(config.target_eps, config.delta, max(steps, 1), sens,
                                       config.alphas)
        config.noise_mode = "std"
        log.info("calibrated sigma=%.6g for eps=%g over %d steps", config.sigma,
                 config.target_eps, steps)
    rng = np.random.default_rng(config.seed)
    ledger = RdpLedger(config.alphas)
    state = OptimizerState()
    eval_set = eval_set if eval_set is not None else dataset
    metrics: list[EpochMetrics] = []
    writer = fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["epoch", "wall_seconds", "loss", "accuracy", "eps_prime"])
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            for x, y in batches(dataset, config.batch_size, rng):
                train_step(model, x, y, config, ledger, state, rng)
            wall = time.perf_counter() - t0
            acc, loss = evaluate(model, eval_set)
            eps = to_dp(ledger, config.delta)[0] if config.private else 0.0
            m = EpochMetrics(epoch, wall, loss, acc, eps)
            metrics.append(m)
            log.info("epoch %d: %.3fs loss=%.4f acc=%.4f eps'=%.4g", epoch, wall, loss, acc, eps)
            if writer is not None:
                writer.writerow([m.epoch, f"{m.wall_seconds:.6f}", f"{m.loss:.6f}",
                                 f"{m.accuracy:.6f}", f"{m.eps_prime:.6f}"])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, ledger, metrics
