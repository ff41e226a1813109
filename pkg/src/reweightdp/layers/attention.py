"""Multi-head self-attention and the single-block transformer classifier."""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import GradMap, Tape, Var
from ..errors import ContractError, DimensionError
from .base import Layer, LayerCache, Model
from .dense import LayerNorm, Linear, uniform_init
from .pegrad import attention_pe_grad


class MultiHeadAttention(Layer):
    """Bias-free multi-head attention over ``[t, s, d_m]`` inputs.

    ``Q = Q_in W_Q^T`` (likewise K, V); each of ``heads`` heads of width
    ``d_k = d_m / heads`` attends with softmax scores; the concatenated head
    outputs ``H`` are projected as ``Y = H W_O^T``.

    ``scale="inside"`` computes ``softmax(QK^T / sqrt(d_k))``;
    ``scale="outside"`` computes ``softmax(QK^T) / sqrt(d_k)``.
    """

    has_params = True

    def __init__(self, d_model: int, heads: int, name: str = "attention", rng=None,
                 scale: str = "inside"):
        super().__init__(name)
        if d_model % heads:
            raise DimensionError(f"d_model {d_model} not divisible by {heads} heads")
        if scale not in ("inside", "outside"):
            raise ContractError(f"unknown attention scaling {scale!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model, self.heads, self.d_k = d_model, heads, d_model // heads
        self.scale = scale
        for key in ("WQ", "WK", "WV", "WO"):
            self.params[key] = uniform_init(rng, (d_model, d_model), d_model)

    def _split(self, a: Var) -> Var:
        tau, s, _ = a.shape
        return a.reshape(tau, s, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def attend(self, tape: Tape, q_in: Var, k_in: Var, v_in: Var, cache: bool = True) -> Var:
        for a in (q_in, k_in, v_in):
            if a.ndim != 3 or a.shape[2] != self.d_model:
                raise DimensionError(f"{self.name}: expected [t, s, {self.d_model}], got {a.shape}")
        tau, s, _ = q_in.shape
        Q = q_in @ ag.transpose(self._param(tape, "WQ"))
        K = k_in @ ag.transpose(self._param(tape, "WK"))
        V = v_in @ ag.transpose(self._param(tape, "WV"))
        qh, kh, vh = self._split(Q), self._split(K), self._split(V)     # [t, h, s, d_k]
        scores = qh @ kh.transpose(0, 1, 3, 2)                           # [t, h, s, s]
        root = float(np.sqrt(self.d_k))
        if self.scale == "inside":
            A = ag.softmax(scores / root, axis=-1)
        else:
            A = ag.softmax(scores, axis=-1) / root
        H = (A @ vh).transpose(0, 2, 1, 3).reshape(tau, s, self.d_model)
        Y = H @ ag.transpose(self._param(tape, "WO"))
        if cache:
            for node in (Q, K, V, Y):
                tape.retain(node)
            self.cache = LayerCache(X=(q_in.value, k_in.value, v_in.value), Z=(Q, K, V, Y),
                                    aux={"H": H.value, "A": A.value})
        return Y

    def forward(self, tape: Tape, x: Var, cache: bool = True) -> Var:
        return self.attend(tape, x, x, x, cache)

    def pe_grads(self, grads: GradMap) -> dict[str, np.ndarray]:
        c = self._require_cache()
        dQ, dK, dV, dY = (grads[z.id] for z in c.Z)
        qin, kin, vin = c.X
        gq, gk, gv, go = attention_pe_grad(dQ, dK, dV, dY, qin, kin, vin, c.aux["H"])
        n = self.name
        return {f"{n}.WQ": gq, f"{n}.WK": gk, f"{n}.WV": gv, f"{n}.WO": go}


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerClassifier(Model):
    """Frozen embedding + positional encoding, one encoder block, linear head.

    Block: ``n1 = LN1(x + MHA(x))``, ``n2 = LN2(n1 + relu(FC1(n1)))``; the head
    classifies the sequence mean of ``n2``.  The embedding table is not a
    parameter.
    """

    def __init__(self, vocab: int, d_model: int, heads: int, num_classes: int, max_len: int,
                 rng=None, embedding: np.ndarray | None = None, scale: str = "inside",
                 normalizer: str = "std"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if embedding is None:
            embedding = rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(vocab, d_model))
        if embedding.shape != (vocab, d_model):
            raise DimensionError(f"embedding must be [{vocab}, {d_model}], got {embedding.shape}")
        self.embedding = embedding
        self.pos = positional_encoding(max_len, d_model)
        self.attn = MultiHeadAttention(d_model, heads, "attn", rng, scale)
        self.ln1 = LayerNorm(d_model, "ln1", normalizer=normalizer)
        self.fc1 = Linear(d_model, d_model, "fc1", rng)
        self.ln2 = LayerNorm(d_model, "ln2", normalizer=normalizer)
        self.head = Linear(d_model, num_classes, "fc2", rng)
        super().__init__([self.attn, self.ln1, self.fc1, self.ln2, self.head])

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] > len(self.pos):
            raise DimensionError(f"expected [t, s<= {len(self.pos)}] token ids, got {tokens.shape}")
        return self.embedding[tokens] + self.pos[: tokens.shape[1]]

    def logits(self, tape: Tape, x: np.ndarray, cache: bool = True) -> Var:
        # float inputs are taken as already-embedded sequences
        x = np.asarray(x)
        h = tape.input(self.embed(x) if x.dtype.kind in "iu" else x)
        n1 = self.ln1(tape, h + self.attn(tape, h, cache), cache)
        n2 = self.ln2(tape, n1 + ag.relu(self.fc1(tape, n1, cache)), cache)
        return self.head(tape, n2.mean(axis=1), cache)
