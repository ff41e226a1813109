"""Fully-connected, LayerNorm and parameterless layers."""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from .. import tensor as T
from ..autograd import GradMap, Tape, Var
from ..errors import ContractError, DimensionError
from .base import Layer, LayerCache
from .pegrad import layernorm_pe_grad, linear_pe_grad, linear_pe_sqnorm


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Layer):
    """``z = W x + b`` with ``W`` of shape ``[out, in]``.

    Accepts ``[t, in]`` rows or ``[t, s, in]`` sequences (applied per position).
    """

    has_params = True

    def __init__(self, n_in: int, n_out: int, name: str = "linear", rng=None, bias: bool = True):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = uniform_init(rng, (n_out, n_in), n_in)
        if bias:
            self.params["b"] = uniform_init(rng, (n_out,), n_in)

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.name}: expected last extent {self.n_in}, got {x.shape}")
        z = x @ ag.transpose(self._param(tape, "W"))
        if "b" in self.params:
            z = z + self._param(tape, "b")
        if cache:
            tape.retain(z)
            self.cache = LayerCache(X=x.value, Z=z)
        return z

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        c = self._require_cache()
        gw, gb = linear_pe_grad(grads[c.Z.id], c.X)
        out = {f"{self.name}.W": gw}
        if "b" in self.params:
            out[f"{self.name}.b"] = gb
        return out

    def pe_sqnorms(self, grads: GradMap) -> np.ndarray:
        c = self._require_cache()
        dz = grads[c.Z.id]
        if dz.ndim != 2:
            return super().pe_sqnorms(grads)
        sq = linear_pe_sqnorm(dz, c.X)
        if "b" in self.params:
            sq = sq + T.sq_norm_rows(dz)
        return sq


class LayerNorm(Layer):
    """Normalization over the last axis with learned scale and shift.

    ``normalizer="std"`` divides centered inputs by ``sqrt(var + eps)``;
    ``normalizer="variance"`` divides by ``var + eps`` instead.
    """

    has_params = True

    def __init__(self, size: int, name: str = "layernorm", eps: float = 1e-5,
                 normalizer: str = "std"):
        super().__init__(name)
        if normalizer not in ("std", "variance"):
            raise ContractError(f"unknown normalizer {normalizer!r}")
        self.size, self.eps, self.normalizer = size, eps, normalizer
        self.params["gamma"] = np.ones(size)
        self.params["beta"] = np.zeros(size)

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        if x.shape[-1] != self.size:
            raise DimensionError(f"{self.name}: expected last extent {self.size}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        d = x - mu
        var = (d * d).mean(axis=-1, keepdims=True)
        denom = ag.sqrt(var + self.eps) if self.normalizer == "std" else var + self.eps
        hbar = d / denom
        h = hbar * self._param(tape, "gamma") + self._param(tape, "beta")
        if cache:
            tape.retain(h)
            self.cache = LayerCache(X=x.value, Z=h, aux={"hbar": hbar.value})
        return h

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        c = self._require_cache()
        gg, gb = layernorm_pe_grad(grads[c.Z.id], c.aux["hbar"])
        return {f"{self.name}.gamma": gg, f"{self.name}.beta": gb}


_ACTIVATIONS = {"tanh": ag.tanh, "sigmoid": ag.sigmoid, "relu": ag.relu}


class Activation(Layer):
    def __init__(self, kind: str, name: str | None = None):
        if kind not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {kind!r}")
        super().__init__(name or kind)
        self.fn = _ACTIVATIONS[kind]

    def forward(self, tape, x, cache=True):
        return self.fn(x)


class Softmax(Layer):
    def __init__(self, name: str = "softmax"):
        super().__init__(name)

    def forward(self, tape, x, cache=True):
        return ag.softmax(x, axis=-1)


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        super().__init__(name)

    def forward(self, tape, x, cache=True):
        return x.reshape(x.shape[0], -1)


class MaxPool(Layer):
    """Non-overlapping max pooling over all spatial axes (2-D or 3-D)."""

    def __init__(self, size: int = 2, name: str = "maxpool"):
        super().__init__(name)
        self.size = size

    def forward(self, tape, x, cache=True):
        return ag.maxpool(x, self.size)
