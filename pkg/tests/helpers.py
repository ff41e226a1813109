"""Shared test fixtures: small random models per layer family and the IDX corpus."""

import gzip
import struct
from pathlib import Path

import numpy as np

from reweightdp.autograd import Tape, backward_per_example, param_grads, split_losses
from reweightdp.clipping import per_example_norms
from reweightdp.data import IMAGES_MAGIC, LABELS_MAGIC, write_idx
from reweightdp.layers import (LSTM, RNN, Activation, Conv2d, Conv3d, Flatten, LayerNorm, Linear,
                               MaxPool, Sequential, TransformerClassifier)


def _targets(rng, tau, k):
    return rng.integers(0, k, size=tau)


def make_linear(rng, tau):
    n, h, k = rng.integers(2, 12), rng.integers(2, 16), rng.integers(2, 5)
    model = Sequential([Linear(n, h, "fc1", rng), Activation("tanh"), Linear(h, k, "out", rng)])
    return model, rng.normal(size=(tau, n)), _targets(rng, tau, k)


def make_conv2d(rng, tau):
    c_in, c_out, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 4)
    size = int(rng.integers(k + 1, 8))
    out = size - k + 1
    pooled = out // 2
    layers = [Conv2d(c_in, c_out, int(k), "conv", rng), Activation("relu")]
    if pooled >= 1:
        layers.append(MaxPool(2))
        flat = c_out * pooled * pooled
    else:
        flat = c_out * out * out
    classes = 3
    model = Sequential(layers + [Flatten(), Linear(int(flat), classes, "out", rng)])
    return model, rng.normal(size=(tau, c_in, size, size)), _targets(rng, tau, classes)


def make_conv3d(rng, tau):
    model = Sequential([Conv3d(1, 2, 2, "conv", rng), Activation("tanh"), Flatten(),
                        Linear(2 * 27, 3, "out", rng)])
    return model, rng.normal(size=(tau, 1, 4, 4, 4)), _targets(rng, tau, 3)


def make_rnn(rng, tau):
    n, m, steps = rng.integers(1, 6), rng.integers(2, 10), rng.integers(1, 7)
    model = Sequential([RNN(n, m, "rnn", rng), Linear(m, 3, "out", rng)])
    return model, rng.normal(size=(tau, steps, n)), _targets(rng, tau, 3)


def make_lstm(rng, tau):
    n, m, steps = rng.integers(1, 5), rng.integers(2, 8), rng.integers(1, 6)
    model = Sequential([LSTM(n, m, "lstm", rng), Linear(m, 3, "out", rng)])
    return model, rng.normal(size=(tau, steps, n)), _targets(rng, tau, 3)


def make_layernorm(rng, tau):
    n, h = rng.integers(2, 10), rng.integers(2, 17)
    model = Sequential([Linear(n, h, "fc1", rng), LayerNorm(h, "ln"), Activation("tanh"),
                        Linear(h, 3, "out", rng)])
    return model, 2 * rng.normal(size=(tau, n)), _targets(rng, tau, 3)


def make_attention(rng, tau):
    heads = int(rng.integers(1, 3))
    d_model = heads * int(rng.integers(2, 5))
    s = int(rng.integers(1, 5))
    model = TransformerClassifier(20, d_model, heads, 2, s, rng)
    return model, rng.integers(0, 20, size=(tau, s)), _targets(rng, tau, 2)


FAMILIES = {
    "linear": make_linear,
    "conv2d": make_conv2d,
    "rnn": make_rnn,
    "lstm": make_lstm,
    "layernorm": make_layernorm,
    "attention": make_attention,
}


def fast_norms(model, x, y):
    tape = Tape()
    losses = model.losses(tape, x, y, cache=True)
    norms = per_example_norms(model, tape, losses)
    model.reset()
    return norms


def multiloss_norms(model, x, y):
    tape = Tape()
    losses = model.losses(tape, x, y, cache=False)
    out = []
    for gm in backward_per_example(tape, split_losses(losses)):
        g = param_grads(tape, gm)
        out.append(np.sqrt(sum(float(np.vdot(v, v)) for v in g.values())))
    return np.array(out)


def build_idx_corpus(root):
    """Write the IDX fixture corpus; returns ``[(name, images, labels, ok)]``."""
    root = Path(root)
    rng = np.random.default_rng(5)
    imgs = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labs = np.array([3, 7], dtype=np.uint8)
    write_idx(root / "images.idx", imgs, IMAGES_MAGIC)
    write_idx(root / "labels.idx", labs, LABELS_MAGIC)
    good_img = (root / "images.idx").read_bytes()
    good_lab = (root / "labels.idx").read_bytes()

    def put(name, data):
        (root / name).write_bytes(data)
        return root / name

    img, lab = root / "images.idx", root / "labels.idx"
    return [
        ("valid", img, lab, True),
        ("valid-gzip", put("images.idx.gz", gzip.compress(good_img)),
         put("labels.idx.gz", gzip.compress(good_lab)), True),
        ("empty", put("empty.idx", b""), lab, False),
        ("short-header", put("short.idx", good_img[:3]), lab, False),
        ("short-dims", put("dims.idx", good_img[:10]), lab, False),
        ("truncated-payload", put("trunc.idx", good_img[:-1]), lab, False),
        ("truncated-labels", img, put("trunc-lab.idx", good_lab[:-1]), False),
        ("trailing-bytes", put("trail.idx", good_img + b"\0"), lab, False),
        ("wrong-magic", put("magic.idx", struct.pack(">I", 0x00000903) + good_img[4:]), lab, False),
        ("swapped", lab, img, False),
        ("count-mismatch", img, put("one-lab.idx", struct.pack(">II", LABELS_MAGIC, 1) + b"\3"),
         False),
        ("label-range", img, put("range.idx", struct.pack(">II", LABELS_MAGIC, 2) + b"\3\xff"),
         False),
        ("corrupt-gzip", put("bad.gz", b"\x1f\x8b" + b"\0" * 20), lab, False),
    ]
