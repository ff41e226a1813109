import csv
import math

import numpy as np
import pytest

from reweightdp.bench import bench_dataset, build_reference_model
from reweightdp.clipping import nonprivate_gradient
from reweightdp.data import Dataset, synth
from reweightdp.errors import ContractError, DomainError
from reweightdp.layers import Activation, Linear, Sequential
from reweightdp.privacy import RdpLedger, gaussian_rdp_eps
from reweightdp.trainer import (OptimizerState, TrainConfig, apply_update, evaluate, train,
                                train_step)

from conftest import rel_err
from helpers import FAMILIES


def small_mlp(seed=0, d=6, k=3):
    rng = np.random.default_rng(seed)
    return Sequential([Linear(d, 8, "fc1", rng), Activation("sigmoid"), Linear(8, k, "out", rng)])


def toy(n=64, d=6, k=3, seed=0):
    return synth("gaussian-classes", n, (d,), k, seed)


def test_zero_learning_rate_still_charges_ledger():
    model, ds = small_mlp(), toy()
    before = model.state_copy()
    ledger = RdpLedger()
    cfg = TrainConfig(lr=0.0, sigma=0.5, batch_size=16)
    train_step(model, ds.features[:16], ds.targets[:16], cfg, ledger)
    for k, v in model.parameters().items():
        assert np.array_equal(v, before[k])
    assert ledger.steps == 1 and np.all(ledger.eps_acc > 0)


def test_sgd_rule_exact():
    model, ds = small_mlp(), toy()
    x, y = ds.features[:8], ds.targets[:8]
    before = model.state_copy()
    grad = nonprivate_gradient(model, x, y)
    cfg = TrainConfig(lr=0.3, sigma=0.0, clip=1e6, optimizer="sgd", method="reweight")
    train_step(model, x, y, cfg)
    for k, v in model.parameters().items():
        np.testing.assert_allclose(v, before[k] - 0.3 * grad[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("family", sorted(FAMILIES))
@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_update_equal_across_strategies(family, optimizer):
    results = {}
    for method in ("nxbp", "multiloss", "reweight"):
        rng = np.random.default_rng(3)
        model, x, y = FAMILIES[family](rng, 6)
        cfg = TrainConfig(lr=0.05, sigma=0.0, clip=0.5, optimizer=optimizer, method=method, seed=1)
        train_step(model, x, y, cfg, rng=np.random.default_rng(1))
        results[method] = model.parameters()
    for k, ref in results["nxbp"].items():
        assert rel_err(results["reweight"][k], ref) < 1e-6
        assert rel_err(results["multiloss"][k], ref) < 1e-6


def test_ledger_is_t_times_single_step():
    model, ds = small_mlp(), toy()
    cfg = TrainConfig(epochs=3, batch_size=16, sigma=0.2, clip=2.0)
    _, ledger, _ = train(model, ds, cfg)
    steps = 3 * (64 // 16)
    assert ledger.steps == steps
    single = np.array([gaussian_rdp_eps(0.2, 2.0 / 16, a) for a in ledger.alphas])
    np.testing.assert_allclose(ledger.eps_acc, steps * single, rtol=1e-12)


def test_nonprivate_skips_ledger():
    model, ds = small_mlp(), toy()
    _, ledger, metrics = train(model, ds, TrainConfig(epochs=1, method="nonprivate", batch_size=16))
    assert ledger.steps == 0 and metrics[0].eps_prime == 0.0


def test_adam_zero_betas_hand_rule(rng):
    params = {"w": rng.normal(size=(3, 2))}
    start = params["w"].copy()
    grads = {"w": rng.normal(size=(3, 2))}
    cfg = TrainConfig(lr=0.1, beta1=0.0, beta2=0.0, eps_hat=1e-8)
    state = OptimizerState()
    apply_update(params, grads, cfg, state)
    g = grads["w"]
    np.testing.assert_allclose(params["w"], start - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-14)
    # unit-magnitude gradients make the step plain scaled SGD
    unit = {"w": np.sign(g)}
    before = params["w"].copy()
    apply_update(params, unit, TrainConfig(lr=0.1, beta1=0.0, beta2=0.0, eps_hat=0.0), state)
    np.testing.assert_allclose(params["w"], before - 0.1 * unit["w"], rtol=1e-14)


def test_adam_bias_correction_first_step(rng):
    params = {"w": np.zeros(4)}
    g = rng.normal(size=4)
    apply_update(params, {"w": g}, TrainConfig(lr=0.01, eps_hat=0.0), OptimizerState())
    np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-12)


def test_zero_epochs_unchanged():
    model, ds = small_mlp(), toy()
    before = model.state_copy()
    _, ledger, metrics = train(model, ds, TrainConfig(epochs=0, batch_size=8))
    assert metrics == [] and ledger.steps == 0
    for k, v in model.parameters().items():
        assert np.array_equal(v, before[k])


def test_deterministic_given_seed():
    runs = []
    for _ in range(2):
        model, ds = small_mlp(), toy()
        _, _, metrics = train(model, ds, TrainConfig(epochs=2, batch_size=16, seed=4))
        runs.append(([(m.loss, m.accuracy, m.eps_prime) for m in metrics], model.parameters()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_separable_nonprivate_convergence():
    ds = synth("separable", 1000, (20,), 2, seed=0)
    model = small_mlp(0, 20, 2)
    cfg = TrainConfig(epochs=20, batch_size=32, clip=1e6, method="nonprivate", seed=0)
    _, _, metrics = train(model, ds, cfg)
    assert metrics[-1].accuracy >= 0.95


def test_noise_modes():
    cfg = TrainConfig(sigma=2.0, clip=0.5, batch_size=10, noise_mode="multiplier")
    assert cfg.noise_std() == pytest.approx(0.1)
    assert TrainConfig(sigma=2.0).noise_std() == 2.0


def test_target_eps_calibration():
    model, ds = small_mlp(), toy()
    cfg = TrainConfig(epochs=2, batch_size=16, target_eps=4.0, delta=1e-5)
    _, ledger, metrics = train(model, ds, cfg)
    assert metrics[-1].eps_prime <= 4.0
    assert metrics[-1].eps_prime == pytest.approx(4.0, rel=1e-3)


def test_metrics_csv(tmp_path):
    model, ds = small_mlp(), toy()
    path = tmp_path / "metrics.csv"
    _, _, metrics = train(model, ds, TrainConfig(epochs=3, batch_size=16), metrics_csv=path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["epoch", "wall_seconds", "loss", "accuracy", "eps_prime"]
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    eps = [float(r["eps_prime"]) for r in rows]
    assert all(math.isfinite(e) for e in eps) and eps == sorted(eps) and eps[0] < eps[-1]


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(epochs=3, lr=0.5, optimizer="sgd", method="nxbp", target_eps=2.0)
    path = tmp_path / "run.json"
    path.write_text(cfg.to_json())
    assert TrainConfig.from_json(path) == cfg


@pytest.mark.parametrize("kw,err", [({"batch_size": 0}, DomainError), ({"clip": 0.0}, DomainError),
                                    ({"sigma": -1.0}, DomainError), ({"beta1": 1.0}, DomainError),
                                    ({"optimizer": "rmsprop"}, ContractError),
                                    ({"method": "magic"}, ContractError),
                                    ({"noise_mode": "other"}, ContractError)])
def test_config_validation(kw, err):
    with pytest.raises(err):
        TrainConfig(**kw)


def test_train_rejects_oversized_batch():
    with pytest.raises(ContractError):
        train(small_mlp(), toy(n=10), TrainConfig(batch_size=16))


class TestEvaluate:
    def test_constant_logits_give_majority_rate(self):
        model = Sequential([Linear(4, 3, "out")])
        model.layers[0].params["W"][:] = 0.0
        model.layers[0].params["b"][:] = [0.0, 2.0, 1.0]
        y = np.array([1, 1, 1, 0, 2, 1, 0])
        acc, loss = evaluate(model, Dataset(np.ones((7, 4)), y, 3))
        assert acc == pytest.approx(4 / 7)
        logp = np.array([0.0, 2.0, 1.0]) - np.log(np.exp([0.0, 2.0, 1.0]).sum())
        assert loss == pytest.approx(-logp[y].mean())

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(small_mlp(), Dataset(np.zeros((0, 6)), np.zeros(0, int), 3))

    def test_untrained_ten_class_near_chance(self):
        ds = bench_dataset("mlp", 2000, seed=7)
        accs = [evaluate(build_reference_model("mlp", seed=s), ds)[0] for s in range(3)]
        assert all(abs(a - 0.1) <= 0.03 for a in accs)

    def test_no_cache_and_no_privacy_cost(self):
        model, ds = small_mlp(), toy()
        evaluate(model, ds)
        assert all(layer.cache is None for layer in model.layers)
