"""Acceptance criteria 1-7, one test each; each prints a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from reweightdp.autograd import Tape, backward, param_grads
from reweightdp.bench import BenchSpec, bench_dataset, build_reference_model, run_bench
from reweightdp.data import load_idx, synth
from reweightdp.errors import FormatError
from reweightdp.privacy import (RdpLedger, gaussian_rdp_eps, gaussian_step, privacy_report,
                                to_dp)
from reweightdp.trainer import TrainConfig, train, train_step

from conftest import finite_diff, record_criterion, rel_err
from helpers import FAMILIES, build_idx_corpus, fast_norms, make_conv3d, multiloss_norms

BATCHES = [16, 32, 64, 128]


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, trials, max_params = 0.0, 0, 0
    for family, make in FAMILIES.items():
        for _ in range(50):
            tau = int(rng.integers(1, 17))
            model, x, y = make(rng, tau)
            max_params = max(max_params, model.num_params())
            worst = max(worst, rel_err(fast_norms(model, x, y), multiloss_norms(model, x, y)))
            trials += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 60 and max_params <= 5000
    record_criterion(1, ok, f"{trials} trials over {len(FAMILIES)} families, worst rel err "
                            f"{worst:.2e} (< 1e-6), max params {max_params}, {elapsed:.1f}s (< 60s)")
    assert ok


def _reference_batch(name, tau, rng):
    if name == "transformer":
        ds = bench_dataset(name, tau, seed=0)
        return ds.features, ds.targets, 2
    ds = bench_dataset(name, max(tau, 10), seed=0)
    return ds.features[:tau], ds.targets[:tau], 10


def test_criterion_2_update_equality():
    tau, worst = 6, 0.0
    for name in ("mlp", "cnn", "rnn", "lstm", "transformer"):
        x, y, classes = _reference_batch(name, tau, np.random.default_rng(0))
        after = {}
        for method in ("reweight", "nxbp", "multiloss"):
            model = build_reference_model(name, input_shape=x.shape[1:], num_classes=classes,
                                          seed=11)
            cfg = TrainConfig(sigma=0.0, clip=0.1, lr=0.01, method=method, seed=5)
            train_step(model, x, y, cfg, RdpLedger(), rng=np.random.default_rng(5))
            after[method] = np.concatenate([v.ravel() for v in model.parameters().values()])
        for method in ("reweight", "multiloss"):
            worst = max(worst, rel_err(after[method], after["nxbp"]))
    ok = worst < 1e-6
    record_criterion(2, ok, f"mlp/cnn/rnn/lstm/transformer, worst parameter rel diff {worst:.2e} "
                            "(< 1e-6)")
    assert ok


def test_criterion_3_gradient_correctness():
    rng = np.random.default_rng(77)
    makers = list(FAMILIES.values()) + [make_conv3d]
    worst, tensors = 0.0, 0
    for i in range(20):
        model, x, y = makers[i % len(makers)](rng, 3)

        def loss_value():
            return float(model.losses(Tape(), x, y, cache=False).value.sum())

        tape = Tape()
        grads = param_grads(tape, backward(tape, model.losses(tape, x, y, cache=False).sum()))
        for name, p in model.parameters().items():
            fd = finite_diff(loss_value, p, h=1e-6)
            g = grads[name]
            # a numerically vanishing gradient is compared absolutely
            err = rel_err(g, fd) if np.abs(fd).max() > 1e-8 else float(np.abs(g - fd).max())
            worst = max(worst, err)
            tensors += 1
    ok = worst <= 1e-4
    record_criterion(3, ok, f"20 models, {tensors} parameter tensors, worst FD rel err "
                            f"{worst:.2e} (<= 1e-4 at h=1e-6)")
    assert ok


def test_criterion_4_privacy_goldens():
    checks = {}
    checks["rdp(1,1,2)=1"] = gaussian_rdp_eps(1.0, 1.0, 2.0) == 1.0
    eps, a = to_dp(RdpLedger((2.0,), [1.0]), math.exp(-1))
    checks["to_dp=2"] = eps == 2.0 and a == 2.0
    worst = 0.0
    for steps in (1, 7, 100, 1000):
        led = RdpLedger()
        for _ in range(steps):
            gaussian_step(led, 0.37, 0.05)
        single = np.array([gaussian_rdp_eps(0.37, 0.05, al) for al in led.alphas])
        worst = max(worst, float(np.max(np.abs(led.eps_acc - steps * single) / (steps * single))))
    checks["T-step composition"] = worst <= 1e-12
    ok = all(checks.values())
    record_criterion(4, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items())
                     + f" (composition rel err {worst:.1e})")
    assert ok


@pytest.mark.slow
def test_criterion_5_speedup_properties():
    t0 = time.perf_counter()
    spec = BenchSpec(model="mlp", methods=["reweight", "nxbp", "multiloss", "nonprivate"],
                     batch_sizes=BATCHES, depth=2, epochs=5, warmup=1, seed=42)
    rows = run_bench(spec)
    elapsed = time.perf_counter() - t0
    t = {(r["method"], r["batch"]): r["epoch_seconds_median"] for r in rows}
    rw = [t["reweight", b] for b in BATCHES]
    nx = [t["nxbp", b] for b in BATCHES]
    ratio = t["nxbp", 128] / t["reweight", 128]
    non_increasing = all(b <= a * 1.10 for a, b in zip(rw, rw[1:]))
    spread = max(nx) / min(nx)
    checks = [ratio >= 2, non_increasing, spread <= 1.30, elapsed < 15 * 60]
    ok = all(checks)
    record_criterion(5, ok, f"nxbp/reweight at 128 = {ratio:.1f}x (>= 2); reweight s/epoch "
                            f"{'/'.join(f'{v:.3f}' for v in rw)} non-increasing within 10%: "
                            f"{non_increasing}; nxbp max/min {spread:.2f} (<= 1.30); full matrix "
                            f"{elapsed:.0f}s (< 900s, {rows[0]['thread_count']} thread)")
    assert ok


def test_criterion_6_training_sanity():
    ds = synth("separable", 1000, (20,), 2, seed=0)

    def model():
        return build_reference_model("mlp", 2, (20,), 2, seed=0)

    _, _, plain = train(model(), ds, TrainConfig(epochs=20, batch_size=32, method="nonprivate",
                                                  seed=0))
    cfg = TrainConfig(epochs=20, batch_size=32, clip=1.0, sigma=0.05, optimizer="sgd", lr=0.5,
                      method="reweight", seed=0)
    _, ledger, dp = train(model(), ds, cfg)
    report = privacy_report(ledger, cfg.noise_std(), cfg.clip, cfg.batch_size, cfg.delta)
    eps = [m.eps_prime for m in dp]
    finite = all(math.isfinite(e) for e in eps) and math.isfinite(report["final"]["eps_prime"])
    increasing = all(b > a for a, b in zip(eps, eps[1:]))
    ok = plain[-1].accuracy >= 0.95 and dp[-1].accuracy >= 0.80 and finite and increasing
    record_criterion(6, ok, f"non-private acc {plain[-1].accuracy:.3f} (>= 0.95), DP acc "
                            f"{dp[-1].accuracy:.3f} (>= 0.80), eps' {eps[0]:.3g} -> {eps[-1]:.3g} "
                            f"finite={finite} increasing={increasing}")
    assert ok


def test_criterion_7_format_robustness(tmp_path):
    corpus = build_idx_corpus(tmp_path)
    outcomes = []
    for name, img, lab, valid in corpus:
        try:
            ds = load_idx(img, lab)
            outcomes.append(valid and ds.features.shape == (2, 1, 28, 28))
        except FormatError:
            outcomes.append(not valid)
    ok = all(outcomes)
    n_valid = sum(1 for c in corpus if c[3])
    record_criterion(7, ok, f"{sum(outcomes)}/{len(corpus)} fixtures as specified "
                            f"({n_valid} valid, {len(corpus) - n_valid} corrupt)")
    assert ok
