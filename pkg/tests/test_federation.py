import numpy as np
import pytest

from edgemsi import nn
from edgemsi.federation import (
    PROTOCOLS,
    Federation,
    HyperParams,
    MLPObjective,
    QuadraticObjective,
    init_devices,
    mixing_matrix,
    peer_average,
    run_rounds,
    validate_mixing,
)


@pytest.fixture(scope="module")
def problem():
    rng = np.random.default_rng(0)
    spec = nn.ModelSpec((3, 6, 3))
    X = rng.normal(size=(36, 3))
    y = np.repeat(np.arange(3), 12)
    shards = [np.arange(0, 12), np.arange(12, 24), np.arange(24, 36)]
    return spec, spec.init_params(rng), MLPObjective(spec, X, y), shards


def _go(problem, protocol, rounds, **hp):
    spec, p0, obj, shards = problem
    mixing = mixing_matrix("ring", 3) if protocol == "dsgd" else None
    fed = Federation([obj] * 3, HyperParams(**hp), protocol, mixing=mixing)
    devs = init_devices(protocol, p0, shards, 3, 3)
    return list(run_rounds(devs, fed, rounds))


@pytest.mark.parametrize("protocol", [p for p in PROTOCOLS if p != "gadmm"])
def test_protocols_do_not_mutate_inputs(problem, protocol):
    spec, p0, obj, shards = problem
    fed = Federation([obj] * 3, HyperParams(), protocol, mixing=mixing_matrix("complete", 3) if protocol == "dsgd" else None)
    devs = init_devices(protocol, p0, shards, 3, 3)
    before = [d.params.copy() for d in devs]
    next(iter(run_rounds(devs, fed, 1)))
    for d, b in zip(devs, before):
        np.testing.assert_array_equal(d.params, b)


def test_favg_sends_only_at_checkpoints(problem):
    outs = _go(problem, "favg", 6, tau=3)
    counts = [len(o.uplink) for o in outs]
    assert counts == [0, 0, 3, 0, 0, 3]


def test_fd_uploads_logit_tables_of_present_labels(problem):
    outs = _go(problem, "fd", 1)
    for m in outs[0].uplink:
        assert m.kind == "logit_table"
        # one label per shard, three probabilities per row
        assert m.element_count == 3


def test_fjd_rows_are_jacobians(problem):
    outs = _go(problem, "fjd", 1)
    assert all(m.element_count == 3 * 3 for m in outs[0].uplink)


def test_peer_average_skips_absent_rows():
    a = nn.table_from_sums(np.array([[2.0], [0.0]]), np.array([1, 0]))
    b = nn.table_from_sums(np.array([[4.0], [6.0]]), np.array([1, 1]))
    c = nn.table_from_sums(np.array([[0.0], [0.0]]), np.array([0, 0]))
    avg = peer_average([a, b, c], exclude=2)
    np.testing.assert_allclose(avg.values[:, 0], [3.0, 6.0])


def test_dsgd_complete_mixing_reaches_consensus_step(problem):
    spec, p0, obj, shards = problem
    fed = Federation([obj] * 3, HyperParams(eta=0.1), "dsgd", mixing=mixing_matrix("complete", 3))
    devs = init_devices("dsgd", p0, shards)
    devs[1].params = devs[1].params + 1.0
    out = next(iter(run_rounds(devs, fed, 1)))
    mean = np.mean([d.params for d in devs], axis=0)
    for d, new in zip(devs, out.devices):
        _, g = obj.loss_grad(d.params, d.shard)
        np.testing.assert_allclose(new.params, mean - fed.eta(1) * g, atol=1e-12)


@pytest.mark.parametrize("bad", [[[1, 0.5], [0, 1]], [[0, 1], [1, 0]], [[1, -1], [-1, 1]], [[1, 1, 1]]])
def test_validate_mixing_rejects(bad):
    with pytest.raises(ValueError):
        validate_mixing(bad)


def test_gadmm_chain_two_devices_quadratic():
    objs = [QuadraticObjective(np.eye(2) * 2, [1.0, 0.0]), QuadraticObjective(np.eye(2), [0.0, 3.0])]
    fed = Federation(objs, HyperParams(rho=1.0), "gadmm")
    devs = init_devices("gadmm", np.zeros(2), [np.zeros(1, dtype=int)] * 2)
    for out in run_rounds(devs, fed, 300):
        devs = out.devices
    w_star = np.linalg.solve(np.eye(2) * 3, [1.0, 3.0])
    for d in devs:
        np.testing.assert_allclose(d.params, w_star, atol=1e-8)


def test_fsvrg_full_batch_single_device_is_gd(problem):
    spec, p0, obj, shards = problem
    fed = Federation([obj], HyperParams(eta=0.1, tau=1), "fsvrg")
    devs = init_devices("fsvrg", p0, [np.arange(36)])
    out = next(iter(run_rounds(devs, fed, 1)))
    _, g = obj.loss_grad(p0, np.arange(36))
    np.testing.assert_allclose(out.devices[0].params, p0 - 0.1 * g, atol=1e-14)


def test_hyperparams_validation():
    for kw in ({"eta": 0}, {"tau": 0}, {"alpha": 1.0}, {"beta": 0}, {"rho": -1}, {"T": 0}, {"reg_kind": "l1"}):
        with pytest.raises(ValueError):
            HyperParams(**kw)


def test_channel_hook_sees_every_message(problem):
    spec, p0, obj, shards = problem
    seen = []

    def hook(msg):
        seen.append(msg.kind)
        return msg

    fed = Federation([obj] * 3, HyperParams(), "csgd", uplink=hook, downlink=hook)
    devs = init_devices("csgd", p0, shards)
    next(iter(run_rounds(devs, fed, 1)))
    assert seen == ["gradient"] * 4
