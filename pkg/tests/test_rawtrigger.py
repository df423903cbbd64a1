import itertools

import numpy as np
import pytest

from trojscope import rawtrigger as rt

from _util import constant_net, tiny_net


@pytest.fixture(scope="module")
def X():
    return np.random.default_rng(7).uniform(size=(24, 8, 8, 3))


def test_defaults():
    cfg = rt.PerturbConfig()
    assert (cfg.lambda1, cfg.lambda2_init, cfg.n_epochs) == (1e-4, 0.05, 200)
    assert cfg.fool_low == 0.8 and cfg.fool_high == 0.95 and cfg.lambda2_cap == 0.5
    assert cfg.step_size == 1.0 and rt.PerturbConfig(optimizer="adam").step_size == 0.05


@pytest.mark.parametrize("kwargs", [
    {"lambda1": -1}, {"n_epochs": 0}, {"optimizer": "sgd"}, {"momentum": 1.0},
    {"step_size": 0.0}, {"lambda2_rule": "max"}, {"step_decay": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        rt.PerturbConfig(**kwargs)


def test_lambda2_rules():
    cap, literal = rt.PerturbConfig(), rt.PerturbConfig(lambda2_rule="literal")
    assert rt._next_lambda2(0.05, cap) == pytest.approx(0.06)
    assert rt._next_lambda2(0.45, cap) == 0.5
    assert rt._next_lambda2(0.05, literal) == 0.5
    assert rt._next_lambda2(1.0, literal) == pytest.approx(1.2)


def test_active_pixels_examples():
    assert rt.active_pixels(np.zeros((5, 5, 3))) == 0
    b = np.zeros((5, 5, 3))
    b[2, 3] = 0.5
    assert rt.active_pixels(b) == 1
    noise = np.random.default_rng(0).uniform(0.01, 1, (6, 7, 3)) * np.where(np.arange(3) % 2, 1, -1)
    assert rt.active_pixels(noise) == 42
    with pytest.raises(ValueError):
        rt.active_pixels(b, eps=-1)


def test_soft_threshold():
    np.testing.assert_allclose(rt.soft_threshold(np.array([-2.0, -0.5, 0.0, 0.3, 3.0]), 1.0),
                               [-1.0, 0.0, 0.0, 0.0, 2.0])


@pytest.mark.parametrize("optimizer,seed", list(itertools.product(["prox", "adam"], range(3))))
def test_objective_never_increases_between_lambda2_changes(X, optimizer, seed):
    net = tiny_net(seed)
    cfg = rt.PerturbConfig(n_epochs=40, optimizer=optimizer, alpha_fraction=0.0, fool_high=1.01,
                           lambda2_init=0.01, batch_size=8)
    res = rt.find_perturbation(net, seed % 5, X, cfg)
    hist = res.history
    assert hist
    for a, b in zip(hist, hist[1:]):
        if a["lambda2"] == b["lambda2"]:
            assert b["objective"] <= a["objective"] + 1e-6


def test_recorded_objective_matches_independent_evaluation(X):
    net = tiny_net(1)
    cfg = rt.PerturbConfig(n_epochs=5, lambda2_init=0.01)
    res = rt.find_perturbation(net, 2, X, cfg)
    assert rt.objective(net, X, res.b_hat, 2, cfg.lambda1, res.final_lambda2) == pytest.approx(
        res.history[-1]["objective"], rel=1e-9)


def test_huge_l1_weight_gives_zero_perturbation(X):
    res = rt.find_perturbation(tiny_net(2), 1, X, rt.PerturbConfig(lambda2_init=1e3, n_epochs=20))
    assert np.abs(res.b_hat).sum() < 1e-3


def test_constant_target_net_leaves_b_at_zero():
    net = constant_net(2)
    res = rt.find_perturbation(net, 2, np.full((1, 8, 8, 3), 0.4), rt.PerturbConfig(n_epochs=10))
    assert np.abs(res.b_hat).max() < 1e-6
    assert res.achieved_fooling == 1.0


@pytest.mark.parametrize("alpha_fraction", [0.0, 0.05, 1.0])
@pytest.mark.parametrize("seed", range(3))
def test_early_stop_only_with_fooling_and_enough_active_pixels(X, alpha_fraction, seed):
    net = tiny_net(seed)
    cfg = rt.PerturbConfig(n_epochs=60, alpha_fraction=alpha_fraction, lambda2_init=0.005, batch_size=8)
    res = rt.find_perturbation(net, (seed + 1) % 5, X, cfg)
    alpha = 8 * 8 * alpha_fraction
    if res.stop_reason == "fooling":
        last = res.history[-1]
        assert last["fooling"] >= cfg.fool_high and last["active"] >= alpha
        assert res.epochs_used == last["epoch"] < cfg.n_epochs
    else:
        assert all(h["fooling"] < cfg.fool_high or h["active"] < alpha for h in res.history[:-1])


def test_early_stop_fires_on_an_easy_target(X):
    res = rt.find_perturbation(tiny_net(0), 1, X, rt.PerturbConfig(alpha_fraction=0.0, lambda2_init=0.005,
                                                                  batch_size=8))
    assert res.stop_reason == "fooling" and res.achieved_fooling >= 0.95


def test_deterministic(X):
    cfg = rt.PerturbConfig(n_epochs=15, batch_size=8)
    a = rt.find_perturbation(tiny_net(4), 3, X, cfg)
    b = rt.find_perturbation(tiny_net(4), 3, X, cfg)
    np.testing.assert_array_equal(a.b_hat, b.b_hat)
    assert a.history == b.history


def test_bad_inputs(X):
    with pytest.raises(ValueError):
        rt.find_perturbation(tiny_net(), 9, X)
    with pytest.raises(ValueError):
        rt.find_perturbation(tiny_net(), 0, X[:0])


def test_uint8_and_float_inputs_agree(X):
    x8 = np.rint(X * 255).astype(np.uint8)
    cfg = rt.PerturbConfig(n_epochs=5, batch_size=8)
    a = rt.find_perturbation(tiny_net(1), 0, x8, cfg)
    b = rt.find_perturbation(tiny_net(1), 0, x8.astype(np.float64) / 255, cfg)
    np.testing.assert_allclose(a.b_hat, b.b_hat)


def test_raw_trigger_round_trip(tmp_path):
    b = np.random.default_rng(0).normal(scale=0.4, size=(6, 5, 3))
    b[0, 0, 0] = 1.7
    raw = rt.RawTrigger(b, 3, 0.97, 42, 0.0864)
    path = str(tmp_path / "b_hat.pam")
    rt.save_raw_trigger(raw, path)
    back = rt.load_raw_trigger(path)
    np.testing.assert_allclose(back.b_hat, b, atol=1.7 / 32767)
    assert back.sidecar() == raw.sidecar()
    (tmp_path / "b_hat.json").unlink()
    assert rt.load_raw_trigger(path).target == -1


def test_mass_fraction_in_box():
    b = np.zeros((10, 10, 3))
    b[2:4, 2:4] = 0.5
    b[8, 8] = 0.5
    assert rt.mass_fraction_in_box(b, (2, 2, 2, 2)) == pytest.approx(0.8)
    assert rt.mass_fraction_in_box(np.zeros((4, 4, 3)), (0, 0, 2, 2)) == 0.0
