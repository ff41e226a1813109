"""Closed-form per-example gradients from (dL/dZ, X) pairs.

Every function takes the gradient of the loss with respect to a layer's
pre-activation together with the layer's cached input and returns one
gradient tensor per batch row.  ``dZ`` must be the gradient of the *sum* of
per-example losses (equivalently, of a single example's loss per row);
gradients of a batch-mean loss are ``1/t`` times smaller.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import tensor as T
from ..errors import DimensionError


def _check_batch(*arrays: np.ndarray) -> None:
    taus = {a.shape[0] for a in arrays}
    if len(taus) != 1:
        raise DimensionError("batch extents differ: " + ", ".join(str(a.shape) for a in arrays))


def linear_pe_grad(dZ: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example ``(gradW [t,m,n], gradB [t,m])`` of ``z = W x + b``.

    Rows of shape ``[t, m]`` / ``[t, n]`` give ``gradW[i] = dZ[i] (x) X[i]``.
    Sequence inputs ``[t, s, m]`` / ``[t, s, n]`` (a linear map applied at
    every position) sum the outer products over positions.
    """
    _check_batch(dZ, X)
    if dZ.ndim == 2 and X.ndim == 2:
        return T.outer_batch(dZ, X), dZ.copy()
    if dZ.ndim == 3 and X.ndim == 3 and dZ.shape[1] == X.shape[1]:
        return T.bmm(np.swapaxes(dZ, 1, 2), X), dZ.sum(axis=1)
    raise DimensionError(f"linear_pe_grad shape mismatch: dZ {dZ.shape}, X {X.shape}")


def linear_pe_sqnorm(dZ: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Squared Frobenius norm of each per-example weight gradient, never materialized.

    ``||dZ[i] (x) X[i]||^2 = ||dZ[i]||^2 ||X[i]||^2``.  Weight only; the bias
    contribution is ``sq_norm_rows(dZ)``.
    """
    if dZ.ndim != 2 or X.ndim != 2:
        raise DimensionError(f"linear_pe_sqnorm expects matrices, got {dZ.shape} and {X.shape}")
    _check_batch(dZ, X)
    return T.sq_norm_rows(dZ) * T.sq_norm_rows(X)


def _conv_pe_grad(dZ, X, kernel, stride, padding):
    nd = len(kernel)
    if dZ.ndim != nd + 2 or X.ndim != nd + 2:
        raise DimensionError(f"expected order-{nd + 2} dZ and X, got {dZ.shape} and {X.shape}")
    _check_batch(dZ, X)
    tau, c_out = dZ.shape[:2]
    c_in = X.shape[1]
    expect = tuple(T.conv_out_extent(s, k, stride, padding) for s, k in zip(X.shape[2:], kernel))
    if dZ.shape[2:] != expect:
        raise DimensionError(f"dZ spatial extents {dZ.shape[2:]} inconsistent with input "
                             f"{X.shape[2:]} and kernel {tuple(kernel)} (expected {expect})")
    patches = T._unfold(X, kernel, stride, padding)            # [t, P, c_in * prod(k)]
    dz = dZ.reshape(tau, c_out, -1)                              # [t, c_out, P]
    grad = T.bmm(dz, patches).reshape(tau, c_out, c_in, *kernel)
    return grad, dz.sum(axis=2)


def conv2d_pe_grad(dZ: np.ndarray, X: np.ndarray, kernel, stride: int = 1,
                   padding: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-example kernel gradients ``[t, c_out, c_in, kh, kw]`` and bias gradients ``[t, c_out]``.

    The kernel gradient is one batched GEMM of the reshaped ``dZ``
    (``[t, c_out, P]``) against the im2col patches of ``X`` (``[t, P, K]``).
    """
    kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
    return _conv_pe_grad(dZ, X, kernel, stride, padding)


def conv3d_pe_grad(dZ: np.ndarray, X: np.ndarray, kernel, stride: int = 1,
                   padding: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Volumetric analogue of :func:`conv2d_pe_grad` (input ``[t, c_in, D, H, W]``)."""
    kernel = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
    return _conv_pe_grad(dZ, X, kernel, stride, padding)


def rnn_pe_grad(dZ_list: Sequence[np.ndarray], H_list: Sequence[np.ndarray],
                X_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example ``(gradW, gradV, gradB)`` of ``z_t = W h_{t-1} + V x_t + b``.

    ``H_list[t]`` is the hidden state fed *into* step ``t``.  The sum over
    time of per-step outer products is evaluated as a single bmm over the
    time-stacked operands.
    """
    if not (len(dZ_list) == len(H_list) == len(X_list)) or not dZ_list:
        raise DimensionError(f"sequence lengths differ or are empty: {len(dZ_list)}, "
                             f"{len(H_list)}, {len(X_list)}")
    dZ = np.stack(dZ_list, axis=1)     # [t, T, m]
    H = np.stack(H_list, axis=1)       # [t, T, m_h]
    X = np.stack(X_list, axis=1)       # [t, T, n]
    _check_batch(dZ, H, X)
    dZt = np.swapaxes(dZ, 1, 2)
    return T.bmm(dZt, H), T.bmm(dZt, X), dZ.sum(axis=1)


def lstm_pe_grad(dZ_list, H_list, X_list):
    """Stacked-gate LSTM: identical to :func:`rnn_pe_grad` with ``4m`` rows.

    Gate rows are ordered forget, input, cell candidate, output.
    """
    if dZ_list and dZ_list[0].shape[1] != 4 * H_list[0].shape[1]:
        raise DimensionError(f"LSTM pre-activations must have 4*m = {4 * H_list[0].shape[1]} "
                             f"columns, got {dZ_list[0].shape[1]}")
    return rnn_pe_grad(dZ_list, H_list, X_list)


def layernorm_pe_grad(dH: np.ndarray, Hbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``gradGamma = dH * Hbar`` and ``gradBeta = dH``, summed over any middle axes."""
    if dH.shape != Hbar.shape:
        raise DimensionError(f"layernorm_pe_grad shape mismatch: {dH.shape} vs {Hbar.shape}")
    g_gamma = dH * Hbar
    if dH.ndim > 2:
        axes = tuple(range(1, dH.ndim - 1))
        return g_gamma.sum(axis=axes), dH.sum(axis=axes)
    return g_gamma, dH.copy()


def attention_pe_grad(dQ, dK, dV, dY, Qin, Kin, Vin, H):
    """Per-example projection gradients of multi-head attention.

    ``gradW^Q[i] = dQ[i]^T Qin[i]`` and likewise for K, V; ``gradW^O[i] =
    dY[i]^T H[i]``, where ``H`` is the concatenated head output.  All
    operands are ``[t, s, d_m]``.
    """
    pairs = ((dQ, Qin), (dK, Kin), (dV, Vin), (dY, H))
    out = []
    for d, x in pairs:
        if d.ndim != 3 or d.shape[:2] != x.shape[:2]:
            raise DimensionError(f"attention_pe_grad shape mismatch: {d.shape} vs {x.shape}")
        out.append(T.bmm(np.swapaxes(d, 1, 2), x))
    return tuple(out)
