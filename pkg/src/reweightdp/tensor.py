"""Dense float64 tensors and the batched kernels per-example gradients reduce to.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Every kernel here treats axis 0 as the batch axis.

Patch layout used by :func:`im2col` / :func:`im2col3d`: a patch row is the
receptive field flattened channel-major, then row-major inside the kernel
window, i.e. column index ``c * kh * kw + i * kw + j``.  This is exactly the
layout of ``weight.reshape(c_out, -1)`` for a weight of shape
``[c_out, c_in, kh, kw]``.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import DimensionError

DTYPE = np.float64


def tensor(data, dtype=DTYPE) -> np.ndarray:
    """Build a contiguous float64 tensor of order 1..5 with positive extents."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 5:
        raise DimensionError(f"tensor order must be 1..5, got shape {arr.shape}")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
    return arr


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product: ``out[i] = a[i] @ b[i]``."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"bmm expects order-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def outer_batch(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-row outer product ``out[i] = u[i] (x) v[i]`` via bmm on [t,m,1] x [t,1,n]."""
    if u.ndim != 2 or v.ndim != 2 or u.shape[0] != v.shape[0]:
        raise DimensionError(f"outer_batch batch mismatch: {u.shape} and {v.shape}")
    return bmm(u[:, :, None], v[:, None, :])


def sq_norm_rows(x: np.ndarray) -> np.ndarray:
    """Squared L2 norm of each batch row (all trailing axes flattened)."""
    flat = x.reshape(x.shape[0], -1)
    return np.einsum("ij,ij->i", flat, flat)


def _out_extents(spatial: Sequence[int], kernel: Sequence[int], stride: int) -> tuple[int, ...]:
    return tuple((s - k) // stride + 1 for s, k in zip(spatial, kernel))


def _unfold(x: np.ndarray, kernel: Sequence[int], stride: int, padding: int) -> np.ndarray:
    nd = len(kernel)
    if x.ndim != nd + 2:
        raise DimensionError(f"expected input of order {nd + 2}, got shape {x.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if padding:
        pad = [(0, 0), (0, 0)] + [(padding, padding)] * nd
        x = np.pad(x, pad)
    tau, c = x.shape[:2]
    spatial = x.shape[2:]
    if any(k > s for k, s in zip(kernel, spatial)):
        raise DimensionError(f"kernel {tuple(kernel)} larger than input extent {tuple(spatial)}")
    out = _out_extents(spatial, kernel, stride)
    buf = np.empty((tau, c, *kernel, *out), dtype=x.dtype)
    for off in itertools.product(*(range(k) for k in kernel)):
        src = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out))
        buf[(slice(None), slice(None), *off)] = x[(slice(None), slice(None), *src)]
    # [t, c, *k, *o] -> [t, *o, c, *k]
    perm = (0, *range(2 + nd, 2 + 2 * nd), 1, *range(2, 2 + nd))
    return buf.transpose(perm).reshape(tau, int(np.prod(out)), c * int(np.prod(kernel)))


def _fold(cols: np.ndarray, x_shape: Sequence[int], kernel: Sequence[int], stride: int,
          padding: int) -> np.ndarray:
    nd = len(kernel)
    tau, c = x_shape[:2]
    spatial = tuple(s + 2 * padding for s in x_shape[2:])
    out = _out_extents(spatial, kernel, stride)
    buf = cols.reshape(tau, *out, c, *kernel)
    perm = (0, 1 + nd, *range(2 + nd, 2 + 2 * nd), *range(1, 1 + nd))
    buf = buf.transpose(perm)
    x = np.zeros((tau, c, *spatial), dtype=cols.dtype)
    for off in itertools.product(*(range(k) for k in kernel)):
        dst = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out))
        x[(slice(None), slice(None), *dst)] += buf[(slice(None), slice(None), *off)]
    if padding:
        crop = tuple(slice(padding, s - padding) for s in spatial)
        x = x[(slice(None), slice(None), *crop)]
    return np.ascontiguousarray(x)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Lower ``[t, c_in, H, W]`` images to patch rows ``[t, P, kh*kw*c_in]``."""
    return _unfold(x, (kh, kw), stride, padding)


def col2im(cols: np.ndarray, x_shape: Sequence[int], kh: int, kw: int, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image grid."""
    return _fold(cols, x_shape, (kh, kw), stride, padding)


def im2col3d(x: np.ndarray, kd: int, kh: int, kw: int, stride: int = 1,
             padding: int = 0) -> np.ndarray:
    """Volumetric lowering of ``[t, c_in, D, H, W]`` to ``[t, P, kd*kh*kw*c_in]``."""
    return _unfold(x, (kd, kh, kw), stride, padding)


def col2im3d(cols: np.ndarray, x_shape: Sequence[int], kd: int, kh: int, kw: int,
             stride: int = 1, padding: int = 0) -> np.ndarray:
    return _fold(cols, x_shape, (kd, kh, kw), stride, padding)


def conv_out_extent(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1
