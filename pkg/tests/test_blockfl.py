import math

import numpy as np
import pytest

from edgemsi import blockfl as bfl
from edgemsi.config import validate_config
from edgemsi.experiment import build_setup, run_experiment


def test_optimal_lambda_example():
    assert bfl.optimal_lambda(10, 1.0, 0.0) == pytest.approx(2 / (1 + math.sqrt(41)))
    assert bfl.optimal_lambda(10, 1.0) == pytest.approx(0.2702, abs=1e-4)


def test_optimal_lambda_monotone():
    by_n = [bfl.optimal_lambda(n, 1.0) for n in range(1, 30)]
    by_t = [bfl.optimal_lambda(10, t) for t in np.linspace(0.1, 5, 30)]
    assert all(a > b for a, b in zip(by_n, by_n[1:]))
    assert all(a > b for a, b in zip(by_t, by_t[1:]))
    with pytest.raises(ValueError):
        bfl.optimal_lambda(10, 0.0)


def test_round_accounting_identity():
    cfg = bfl.BlockFlConfig(t_wait_s=0.3)
    rng = np.random.default_rng(0)
    for _ in range(500):
        r = bfl.simulate_block_round(cfg, rng)
        assert r.total_s == cfg.t_wait_s + r.mining_s + cfg.t_bp_s + (r.extra_s if r.forked else 0.0)
        assert r.extra_s == (cfg.rollback_s if r.forked else 0.0)


def test_mining_mean_small_rate():
    cfg = bfl.BlockFlConfig(n_miners=5, lambda_bgr=0.01)
    rng = np.random.default_rng(1)
    mean = np.mean([bfl.simulate_block_round(cfg, rng).mining_s for _ in range(10_000)])
    assert mean == pytest.approx(1 / (5 * 0.01), rel=0.05)


def test_zero_propagation_never_forks():
    cfg = bfl.BlockFlConfig(t_bp_s=0.0, lambda_bgr=0.5)
    rng = np.random.default_rng(2)
    assert not any(bfl.simulate_block_round(cfg, rng).forked for _ in range(10_000))


def test_fork_probability_monotone_in_rate():
    rng = np.random.default_rng(3)
    freq = []
    for lam in (0.05, 0.1, 0.2, 0.4):
        cfg = bfl.BlockFlConfig(lambda_bgr=lam)
        freq.append(np.mean([bfl.simulate_block_round(cfg, rng).forked for _ in range(10_000)]))
    assert all(b >= a - 0.01 for a, b in zip(freq, freq[1:]))


def test_malfunction_identity_and_shift():
    agg = np.linspace(-1, 1, 7)
    rng = np.random.default_rng(0)
    for out in bfl.apply_malfunction(agg, bfl.Malfunction(prob=0.0), 4, rng):
        np.testing.assert_array_equal(out, agg)
    for out in bfl.apply_malfunction(agg, bfl.Malfunction(prob=1.0, noise_mean=-0.1, noise_var=0.0), 4, rng):
        np.testing.assert_allclose(out, agg - 0.1, atol=1e-15)


def _blockfl_cfg(**extra):
    return validate_config({"protocol": {"kind": "blockfl"}, "rounds": 4, "data": {"n_devices": 4}, **extra})


def test_healthy_miners_keep_undistorted_aggregate():
    cfg = _blockfl_cfg(blockfl={"malfunction": {"prob": 0.5}})
    setup = build_setup(cfg)
    bcfg = bfl.BlockFlConfig(n_miners=4, malfunction=bfl.Malfunction(prob=0.5))
    rng = np.random.default_rng(5)
    new, up, _ = bfl.blockfl_round(setup.devices, setup.fed, 1, bcfg, rng)
    clean = np.mean([m.payload for m in up], axis=0)
    exact = [np.array_equal(d.params, clean) for d in new]
    assert 0 < sum(exact) < 4


def test_degenerate_chain_latency():
    cfg = _blockfl_cfg(blockfl={"t_bp_s": 0.0, "rollback_s": 0.0, "lambda_bgr": 0.5})
    fl = run_experiment(validate_config({"protocol": {"kind": "favg"}, "rounds": 4, "data": {"n_devices": 4}}))
    bl = run_experiment(cfg)
    extra = bl[-1].sim_time_s - fl[-1].sim_time_s
    assert extra > 0 and bl[-1].train_loss == pytest.approx(fl[-1].train_loss)


def test_e2e_deterministic_and_forks_monotone():
    cfg = _blockfl_cfg(blockfl={"malfunction": {}})
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a == b
    forks = [r.forks for r in a]
    assert forks == sorted(forks)


def test_latency_grid_brackets_optimum():
    lam = bfl.optimal_lambda(10, 1.0)
    grid = lam * np.logspace(-1, 1, 21)
    lat = bfl.latency_grid(bfl.BlockFlConfig(), grid, trials=2000, seed=0)
    assert lat[0] > lat[10]


def test_miner_count_must_match_devices():
    with pytest.raises(ValueError):
        run_experiment(_blockfl_cfg(blockfl={"n_miners": 3}))


def test_zero_propagation_needs_explicit_rate():
    with pytest.raises(ValueError):
        _blockfl_cfg(blockfl={"t_bp_s": 0.0})
