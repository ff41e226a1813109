"""Per-epoch timing of the clipping strategies on the five reference architectures."""

from __future__ import annotations

import csv
import gc
import logging
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .data import Dataset, batches, rows_as_sequence, synth
from .errors import ContractError
from .layers import (LSTM, RNN, Activation, Conv2d, Flatten, Linear, MaxPool, Model, Sequential,
                     TransformerClassifier)
from .trainer import OptimizerState, TrainConfig, evaluate, train_step

log = logging.getLogger(__name__)

MODELS = ("mlp", "cnn", "rnn", "lstm", "transformer")
CSV_COLUMNS = ["model", "method", "batch", "depth", "epoch_seconds_median", "speedup_vs_nxbp",
               "final_accuracy", "thread_count"]

# transformer inputs: synthetic token sequences with frozen embeddings
VOCAB, EMBED_DIM, SEQ_LEN, HEADS = 1000, 200, 64, 4


def mlp_widths(depth: int) -> list[int]:
    if depth < 1:
        raise ContractError(f"depth must be >= 1, got {depth}")
    return ([128, 256] + [256] * max(depth - 2, 0))[:depth]


def build_reference_model(name: str, depth: int = 2, input_shape=(1, 28, 28),
                          num_classes: int = 10, seed: int = 0) -> Model:
    """MLP / CNN / RNN / LSTM / transformer as used in the timing experiments."""
    rng = np.random.default_rng(seed)
    if name == "mlp":
        layers, n_in = [Flatten()], int(np.prod(input_shape))
        for i, width in enumerate(mlp_widths(depth)):
            layers += [Linear(n_in, width, f"fc{i + 1}", rng), Activation("sigmoid", f"act{i + 1}")]
            n_in = width
        layers.append(Linear(n_in, num_classes, "out", rng))
        return Sequential(layers)
    if name == "cnn":
        c, h, w = input_shape
        conv1 = Conv2d(c, 20, 5, "conv1", rng)
        h, w = (h - 4) // 2, (w - 4) // 2
        conv2 = Conv2d(20, 50, 5, "conv2", rng)
        h, w = (h - 4) // 2, (w - 4) // 2
        if h < 1 or w < 1:
            raise ContractError(f"input {input_shape} too small for the reference CNN")
        return Sequential([conv1, Activation("relu", "relu1"), MaxPool(2, "pool1"),
                           conv2, Activation("relu", "relu2"), MaxPool(2, "pool2"),
                           Flatten(), Linear(50 * h * w, 128, "fc1", rng),
                           Activation("relu", "relu3"), Linear(128, num_classes, "out", rng)])
    if name in ("rnn", "lstm"):
        n_in = input_shape[-1]
        cell = (RNN(n_in, 128, "rnn", rng, "tanh") if name == "rnn"
                else LSTM(n_in, 128, "lstm", rng))
        return Sequential([cell, Linear(128, num_classes, "out", rng)])
    if name == "transformer":
        return TransformerClassifier(VOCAB, EMBED_DIM, HEADS, num_classes, SEQ_LEN, rng)
    raise ContractError(f"unknown model {name!r}; expected one of {MODELS}")


def bench_dataset(model: str, n: int, seed: int) -> Dataset:
    """Synthetic stand-ins: 28x28 images, row sequences, or token sequences."""
    if model == "transformer":
        return synth("token-seq", n, (SEQ_LEN,), 2, seed, vocab=VOCAB)
    ds = synth("gaussian-classes", n, (1, 28, 28), 10, seed, separation=6.0)
    if model in ("rnn", "lstm"):
        return Dataset(rows_as_sequence(ds.features), ds.targets, ds.num_classes)
    return ds


@dataclass
class BenchSpec:
    model: str = "mlp"
    methods: list = field(default_factory=lambda: ["reweight", "nxbp", "multiloss", "nonprivate"])
    batch_sizes: list = field(default_factory=lambda: [16, 32, 64, 128])
    depth: int = 2
    epochs: int = 5
    warmup: int = 1
    records: int = 2000
    seed: int = 42
    threads: int = 1
    clip: float = 1.0
    sigma: float = 0.05

    def __post_init__(self):
        if self.model not in MODELS:
            raise ContractError(f"unknown model {self.model!r}")
        if not 0 <= self.warmup < self.epochs:
            raise ContractError(f"need 0 <= warmup < epochs, got {self.warmup}, {self.epochs}")
        if any(b < 1 for b in self.batch_sizes) or not self.batch_sizes:
            raise ContractError(f"batch sizes must be positive, got {self.batch_sizes}")
        if not self.methods:
            raise ContractError("no methods given")


def _thread_count() -> int:
    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return max(counts) if counts else 1


class CellRun:
    """One (method, batch size) cell: its own model, optimizer state and RNG."""

    def __init__(self, spec: BenchSpec, dataset: Dataset, method: str, batch: int):
        self.spec, self.dataset, self.batch = spec, dataset, batch
        self.model = build_reference_model(spec.model, spec.depth, dataset.features.shape[1:],
                                           dataset.num_classes, spec.seed)
        self.config = TrainConfig(epochs=spec.epochs, batch_size=batch, clip=spec.clip,
                                  sigma=spec.sigma, method=method, seed=spec.seed)
        self.rng = np.random.default_rng(spec.seed)
        self.state = OptimizerState()
        self.times: list[float] = []

    def epoch(self) -> float:
        # collector pauses land at random points in an epoch; keep them out of
        # the timed region, as timeit does
        gc.collect()
        gc.disable()
        try:
            t0 = time.perf_counter()
            for x, y in batches(self.dataset, self.batch, self.rng):
                train_step(self.model, x, y, self.config, None, self.state, self.rng)
            elapsed = time.perf_counter() - t0
        finally:
            gc.enable()
        self.times.append(elapsed)
        return elapsed

    def result(self) -> dict:
        acc, _ = evaluate(self.model, self.dataset)
        return {"epoch_seconds": list(self.times),
                "epoch_seconds_median": statistics.median(self.times[self.spec.warmup:]),
                "final_accuracy": acc}


def time_cell(spec: BenchSpec, dataset: Dataset, method: str, batch: int) -> dict:
    """Time a single cell in isolation."""
    cell = CellRun(spec, dataset, method, batch)
    for _ in range(spec.epochs):
        cell.epoch()
    return cell.result()


def run_bench(spec: BenchSpec, dataset: Dataset | None = None) -> list[dict]:
    """One row per (method, batch size); failing cells are reported, not raised.

    Epochs are interleaved round-robin across cells, so slow drift in machine
    speed over the run is shared by every cell instead of biasing whichever
    cells happen to run first.
    """
    dataset = dataset if dataset is not None else bench_dataset(spec.model, spec.records, spec.seed)
    rows, runs = [], {}
    with threadpool_limits(limits=spec.threads):
        threads = _thread_count()
        for batch in spec.batch_sizes:
            for method in spec.methods:
                row = {"model": spec.model, "method": method, "batch": batch, "depth": spec.depth,
                       "thread_count": threads, "status": "ok"}
                rows.append(row)
                try:
                    runs[method, batch] = CellRun(spec, dataset, method, batch)
                except MemoryError as exc:
                    _fail(row, exc)
        for epoch in range(spec.epochs):
            for row in rows:
                key = (row["method"], row["batch"])
                if row["status"] != "ok":
                    continue
                log.info("bench %s method=%s batch=%d epoch %d", spec.model, *key, epoch + 1)
                try:
                    runs[key].epoch()
                except MemoryError as exc:
                    _fail(row, exc)
                    runs.pop(key)
        for row in rows:
            if row["status"] == "ok":
                row.update(runs.pop((row["method"], row["batch"])).result())
    for batch in spec.batch_sizes:
        cells = {r["method"]: r for r in rows if r["batch"] == batch}
        base = cells.get("nxbp")
        for row in cells.values():
            ok = base is not None and base["status"] == "ok" and row["status"] == "ok"
            row["speedup_vs_nxbp"] = (base["epoch_seconds_median"] / row["epoch_seconds_median"]
                                      if ok else float("nan"))
    return rows


def _fail(row: dict, exc: BaseException) -> None:
    row.update(status=f"failed: {type(exc).__name__}", epoch_seconds_median=float("nan"),
               final_accuracy=float("nan"))


def write_report(rows: list[dict], path) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r["model"], r["method"], r["batch"], r["depth"],
                             f"{r['epoch_seconds_median']:.6f}", f"{r['speedup_vs_nxbp']:.4f}",
                             f"{r['final_accuracy']:.6f}", r["thread_count"]])
