"""2-D and 3-D valid convolutions lowered to GEMM through im2col."""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from .. import tensor as T
from ..autograd import GradMap, Tape, Var
from ..errors import DimensionError
from .base import Layer, LayerCache
from .dense import uniform_init
from .pegrad import conv2d_pe_grad, conv3d_pe_grad


class _ConvNd(Layer):
    has_params = True
    nd = 2

    def __init__(self, c_in: int, c_out: int, kernel, name: str, rng=None, stride: int = 1,
                 padding: int = 0):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        kernel = (kernel,) * self.nd if np.isscalar(kernel) else tuple(kernel)
        if len(kernel) != self.nd:
            raise DimensionError(f"{name}: kernel must have {self.nd} extents, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        fan_in = c_in * int(np.prod(kernel))
        self.params["W"] = uniform_init(rng, (c_out, c_in, *kernel), fan_in)
        self.params["b"] = uniform_init(rng, (c_out,), fan_in)

    def out_shape(self, spatial) -> tuple[int, ...]:
        return tuple(T.conv_out_extent(s, k, self.stride, self.padding)
                     for s, k in zip(spatial, self.kernel))

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        if x.ndim != self.nd + 2 or x.shape[1] != self.c_in:
            raise DimensionError(f"{self.name}: expected [t, {self.c_in}, ...] of order "
                                 f"{self.nd + 2}, got {x.shape}")
        tau = x.shape[0]
        out_sp = self.out_shape(x.shape[2:])
        cols = ag.unfold(x, self.kernel, self.stride, self.padding)       # [t, P, K]
        w = self._param(tape, "W").reshape(self.c_out, -1)                # [c_out, K]
        z = (cols @ ag.transpose(w)).transpose(0, 2, 1)                    # [t, c_out, P]
        z = z.reshape(tau, self.c_out, *out_sp)
        z = z + self._param(tape, "b").reshape(1, self.c_out, *([1] * self.nd))
        if cache:
            tape.retain(z)
            self.cache = LayerCache(X=x.value, Z=z)
        return z

    def _pe(self, dz, x):
        raise NotImplementedError

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        c = self._require_cache()
        gk, gb = self._pe(grads[c.Z.id], c.X)
        return {f"{self.name}.W": gk, f"{self.name}.b": gb}


class Conv2d(_ConvNd):
    nd = 2

    def __init__(self, c_in, c_out, kernel, name="conv2d", rng=None, stride=1, padding=0):
        super().__init__(c_in, c_out, kernel, name, rng, stride, padding)

    def _pe(self, dz, x):
        return conv2d_pe_grad(dz, x, self.kernel, self.stride, self.padding)


class Conv3d(_ConvNd):
    nd = 3

    def __init__(self, c_in, c_out, kernel, name="conv3d", rng=None, stride=1, padding=0):
        super().__init__(c_in, c_out, kernel, name, rng, stride, padding)

    def _pe(self, dz, x):
        return conv3d_pe_grad(dz, x, self.kernel, self.stride, self.padding)
