"""Per-example gradient clipping: the clip rule and four ways to get the clipped mean.

All strategies return ``(1/t) * sum_i clip_c(grad_i)`` as a ``dict`` keyed by
parameter name (the ``nonprivate`` strategy returns the plain mean gradient).

* ``nxbp``      one forward and one backward pass per example.
* ``multiloss`` one batched forward pass, then one backward pass per
  example loss over the shared tape.
* ``reweight``  one batched forward pass and two backward passes: the first
  yields gradients at the retained pre-activations, from which per-example
  norms follow in closed form; the second differentiates the loss reweighted
  by ``nu_i = min(1, c / ||grad_i||)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .autograd import Tape, backward, backward_per_example, param_grads, split_losses
from .errors import ContractError, DomainError
from .layers.base import Model

STRATEGIES = ("nonprivate", "nxbp", "multiloss", "reweight")


@dataclass(frozen=True)
class ClipConfig:
    c: float = 1.0
    strategy: str = "reweight"
    per_layer: bool = False

    def __post_init__(self):
        if not self.c > 0:
            raise DomainError(f"clipping threshold must be positive, got {self.c}")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


@dataclass
class PerExampleNorms:
    """Squared per-example norms accumulated one layer at a time."""

    sq_norms: np.ndarray
    finalized: bool = False
    layers: list = field(default_factory=list)

    @classmethod
    def empty(cls, tau: int) -> "PerExampleNorms":
        return cls(np.zeros(tau))

    def add(self, name: str, sq: np.ndarray) -> None:
        if self.finalized:
            raise ContractError("norms already finalized")
        if np.any(sq < 0):
            raise DomainError(f"negative squared norm from layer {name!r}")
        self.sq_norms = self.sq_norms + sq
        self.layers.append(name)

    def finalize(self) -> np.ndarray:
        self.finalized = True
        return np.sqrt(self.sq_norms)


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """``g / max(1, ||g|| / c)``."""
    if not c > 0:
        raise DomainError(f"clipping threshold must be positive, got {c}")
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g.ravel())) / c)


def weights(norms: np.ndarray, c: float) -> np.ndarray:
    """``nu_i = min(1, c / norm_i)``, with ``nu_i = 1`` for zero norms."""
    norms = np.asarray(norms, dtype=np.float64)
    if np.any(norms < 0):
        raise DomainError("norms must be non-negative")
    out = np.ones_like(norms)
    big = norms > c
    out[big] = c / norms[big]
    return out


def _scale_factors(named: dict[str, np.ndarray], c: float, groups) -> dict[str, float]:
    """Per-parameter clip factor for one example's gradient."""
    if groups is None:
        sq = sum(float(np.vdot(g, g)) for g in named.values())
        f = float(weights(np.array([np.sqrt(sq)]), c)[0])
        return {k: f for k in named}
    thresh = c / np.sqrt(len(groups))
    out = {}
    for members in groups.values():
        sq = sum(float(np.vdot(named[k], named[k])) for k in members)
        f = float(weights(np.array([np.sqrt(sq)]), thresh)[0])
        out.update({k: f for k in members})
    return out


def _layer_groups(model: Model, per_layer: bool):
    if not per_layer:
        return None
    return {layer.name: [f"{layer.name}.{k}" for k in layer.params] for layer in model.layers}


def _check_batch(x, y) -> int:
    tau = len(y)
    if tau == 0:
        raise ContractError("empty batch")
    if len(x) != tau:
        raise ContractError(f"{len(x)} inputs but {tau} targets")
    return tau


def nonprivate_gradient(model: Model, x, y) -> dict[str, np.ndarray]:
    tau = _check_batch(x, y)
    tape = Tape()
    loss = model.losses(tape, x, y, cache=False).sum() / tau
    return param_grads(tape, backward(tape, loss))


def nxbp_strategy(model: Model, x, y, c: float, per_layer: bool = False) -> dict[str, np.ndarray]:
    tau = _check_batch(x, y)
    groups = _layer_groups(model, per_layer)
    acc = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    for i in range(tau):
        tape = Tape()
        loss = model.losses(tape, x[i:i + 1], y[i:i + 1], cache=False).sum()
        g = param_grads(tape, backward(tape, loss))
        for k, f in _scale_factors(g, c, groups).items():
            acc[k] += f * g[k]
    return {k: v / tau for k, v in acc.items()}


def multiloss_strategy(model: Model, x, y, c: float,
                       per_layer: bool = False) -> dict[str, np.ndarray]:
    tau = _check_batch(x, y)
    groups = _layer_groups(model, per_layer)
    tape = Tape()
    losses = model.losses(tape, x, y, cache=False)
    acc = {k: np.zeros_like(v.value) for k, v in tape.params.items()}
    for gm in backward_per_example(tape, split_losses(losses)):
        g = param_grads(tape, gm)
        for k, f in _scale_factors(g, c, groups).items():
            acc[k] += f * g[k]
    return {k: v / tau for k, v in acc.items()}


def per_example_norms(model: Model, tape: Tape, losses) -> np.ndarray:
    """Per-example gradient norms from one backward pass to the retained pre-activations."""
    grads = backward(tape, losses.sum(), params=False)
    acc = PerExampleNorms.empty(losses.shape[0])
    for name, sq in model.pe_layer_sqnorms(grads).items():
        acc.add(name, sq)
    return acc.finalize()


def reweight_strategy(model: Model, x, y, c: float, per_layer: bool = False,
                      return_norms: bool = False):
    tau = _check_batch(x, y)
    model.check_per_example()
    tape = Tape()
    losses = model.losses(tape, x, y, cache=True)
    if per_layer:
        # one scalar weight per example cannot express per-layer factors, so
        # the closed-form per-example gradients are clipped directly
        grads = backward(tape, losses.sum(), params=False)
        pe = model.pe_grads(grads)
        groups = _layer_groups(model, True)
        thresh = c / np.sqrt(len(groups))
        out = {}
        for members in groups.values():
            sq = sum(T.sq_norm_rows(pe[k].reshape(tau, -1)) for k in members)
            nu = weights(np.sqrt(sq), thresh)
            for k in members:
                out[k] = np.tensordot(nu, pe[k], axes=1) / tau
        model.reset()
        return (out, None) if return_norms else out
    norms = per_example_norms(model, tape, losses)
    nu = tape.constant(weights(norms, c))  # constant leaf: no gradient through the norms
    reweighted = (losses * nu).sum() / tau
    out = param_grads(tape, backward(tape, reweighted))
    model.reset()
    return (out, norms) if return_norms else out


def clipped_batch_gradient(model: Model, x, y, config: ClipConfig) -> dict[str, np.ndarray]:
    """Dispatch to the strategy named in ``config``."""
    if config.strategy == "nonprivate":
        return nonprivate_gradient(model, x, y)
    if config.strategy == "nxbp":
        return nxbp_strategy(model, x, y, config.c, config.per_layer)
    if config.strategy == "multiloss":
        return multiloss_strategy(model, x, y, config.c, config.per_layer)
    return reweight_strategy(model, x, y, config.c, config.per_layer)
