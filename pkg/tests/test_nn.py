import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edgemsi import nn


def test_param_count_and_unpack():
    spec = nn.ModelSpec((3, 5, 2))
    assert spec.n_params == 3 * 5 + 5 + 5 * 2 + 2
    layers = spec.unpack(np.arange(spec.n_params, dtype=float))
    assert [W.shape for W, _ in layers] == [(5, 3), (2, 5)]


@pytest.mark.parametrize("widths", [(3,), (3, 0, 2), (3, 4, 1)])
def test_bad_widths(widths):
    with pytest.raises(ValueError):
        nn.ModelSpec(widths)


def test_bad_activation():
    with pytest.raises(ValueError):
        nn.ModelSpec((2, 2), "tanh")


def test_forward_shapes_and_single_vector():
    spec = nn.ModelSpec((4, 6, 3))
    p = spec.init_params(np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(5, 4))
    Z = nn.forward(spec, p, X)
    assert Z.shape == (5, 3)
    np.testing.assert_allclose(nn.forward(spec, p, X[2]), Z[2], rtol=1e-12)


def test_wrong_input_dim_rejected():
    spec = nn.ModelSpec((4, 3))
    with pytest.raises(ValueError):
        nn.forward(spec, spec.init_params(np.random.default_rng(0)), np.zeros((2, 5)))


def test_softmax_temperature_limits():
    z = np.array([1.0, 2.0, 4.0])
    p = nn.softmax_temperature(z, 1.0)
    assert p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(nn.softmax_temperature(z, 1e6), np.full(3, 1 / 3), atol=1e-5)
    assert nn.softmax_temperature(z, 1e-3).argmax() == 2
    with pytest.raises(ValueError):
        nn.softmax_temperature(z, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
    st.floats(0.1, 10),
)
def test_softmax_shift_invariant(z, c, T):
    np.testing.assert_allclose(nn.softmax_temperature(z + c, T), nn.softmax_temperature(z, T), atol=1e-12)


def test_sgd_step_shape_check():
    with pytest.raises(ValueError):
        nn.sgd_step(np.zeros(3), np.zeros(4), 0.1)


def test_loss_decreases_under_sgd():
    rng = np.random.default_rng(0)
    spec = nn.ModelSpec((2, 8, 2))
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] > 0).astype(int)
    p = spec.init_params(rng)
    first = nn.loss(spec, p, X, y)
    for _ in range(200):
        p = nn.sgd_step(p, nn.loss_and_grad(spec, p, X, y)[1], 0.5)
    assert nn.loss(spec, p, X, y) < 0.5 * first
    assert nn.accuracy(spec, p, X, y) > 0.9


def test_logit_table_rows_are_label_means():
    rng = np.random.default_rng(0)
    spec = nn.ModelSpec((3, 4))
    p = spec.init_params(rng)
    X = rng.normal(size=(6, 3))
    y = np.array([0, 0, 2, 2, 2, 3])
    table = nn.logit_table(spec, p, X, y, T=1.0)
    probs = nn.softmax_temperature(nn.forward(spec, p, X), 1.0)
    np.testing.assert_allclose(table.values[2], probs[2:5].mean(axis=0))
    assert not table.present[1] and table.present[0]


def _fd_grad(f, p, h=1e-6):
    out = np.empty_like(p)
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        out[j] = (f(p + e) - f(p - e)) / (2 * h)
    return out


@pytest.mark.parametrize("reg_kind", ["mse", "cross_entropy"])
def test_output_regularizer_gradient(reg_kind):
    rng = np.random.default_rng(2)
    spec = nn.ModelSpec((3, 5, 4), "sigmoid")
    p = spec.init_params(rng) + 0.1 * rng.normal(size=spec.n_params)
    X = rng.normal(size=(6, 3))
    targets = nn.softmax_temperature(rng.normal(size=(6, 4)), 1.0)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    _, g = nn.output_regularizer(spec, p, X, targets, mask, 2.0, reg_kind)
    num = _fd_grad(lambda q: nn.output_regularizer(spec, q, X, targets, mask, 2.0, reg_kind)[0], p)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_jacobian_regularizer_gradient():
    rng = np.random.default_rng(3)
    spec = nn.ModelSpec((3, 5, 4), "sigmoid")
    p = spec.init_params(rng) + 0.1 * rng.normal(size=spec.n_params)
    X = rng.normal(size=(4, 3))
    targets = 0.1 * rng.normal(size=(4, 4, 3))
    _, g = nn.jacobian_regularizer(spec, p, X, targets, None, 1.5)
    num = _fd_grad(lambda q: nn.jacobian_regularizer(spec, q, X, targets, None, 1.5)[0], p)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_regularizer_zero_at_own_outputs():
    rng = np.random.default_rng(4)
    spec = nn.ModelSpec((3, 4))
    p = spec.init_params(rng)
    X = rng.normal(size=(5, 3))
    own = nn.softmax_temperature(nn.forward(spec, p, X), 1.0)
    value, g = nn.output_regularizer(spec, p, X, own)
    assert value == 0.0 and not np.any(g)
