import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certens.bounds import (
    CoefficientSet,
    MarginCoefficients,
    PerturbationSpec,
    compute_normalizer,
    dual_norm,
    linear_outer_bounds,
    margin_coefficient_set,
    margin_coefficients,
    margin_lower_bound,
    normalize_coefficients,
    preactivation_bounds,
    read_bounds_cache,
    relu_relaxation,
    write_bounds_cache,
)
from certens.errors import InvalidInterval, NormalizerDegenerate, Unsupported, UnsupportedNorm
from certens.network import Layer, Network, forward, margin_network, scale_network

from conftest import random_net, sample_ball

INF = np.inf


def test_dual_norm_pairs():
    assert PerturbationSpec(INF, 1).dual_q == 1
    assert PerturbationSpec(2, 1).dual_q == 2
    assert PerturbationSpec(1, 1).dual_q == INF
    assert dual_norm(np.array([3.0, -4.0]), 2) == 5.0


def test_preactivation_first_layer():
    net = Network((Layer([[1.0, -1.0]], [0.0], "relu"), Layer([[1.0]], [0.0], "identity")))
    (l, u), = preactivation_bounds(net, np.zeros(2), PerturbationSpec(INF, 1.0))
    np.testing.assert_allclose([l[0], u[0]], [-2.0, 2.0])


def test_preactivation_zero_eps_exact(rng):
    net = random_net(rng, 3, (5, 4), 2)
    x0 = rng.normal(size=3)
    bnds = preactivation_bounds(net, x0, PerturbationSpec(INF, 0.0))
    h = x0
    for (l, u), layer in zip(bnds, net.layers[:-1]):
        z = layer.weight @ h + layer.bias
        np.testing.assert_allclose(l, z, atol=1e-12)
        np.testing.assert_allclose(u, z, atol=1e-12)
        h = np.maximum(z, 0)


@pytest.mark.parametrize("p", [2, INF])
def test_preactivation_sound_by_sampling(rng, p):
    net = random_net(rng, 4, (8, 8), 3)
    x0 = rng.normal(size=4)
    spec = PerturbationSpec(p, 0.3)
    bnds = preactivation_bounds(net, x0, spec)
    X = x0 + sample_ball(rng, 2000, 4, 0.3, p)
    h = X
    for (l, u), layer in zip(bnds, net.layers[:-1]):
        z = h @ layer.weight.T + layer.bias
        assert np.all(z >= l - 1e-9) and np.all(z <= u + 1e-9)
        h = np.maximum(z, 0)


def test_non_relu_hidden_is_unsupported():
    with pytest.raises(Unsupported):
        Network((Layer([[1.0]], [0.0], "identity"), Layer([[1.0]], [0.0], "identity")))


@pytest.mark.parametrize("l,u,expected", [
    (0.5, 2.0, (1.0, 0.0, 1.0, 0.0)),
    (-2.0, -1.0, (0.0, 0.0, 0.0, 0.0)),
    (-1.0, 1.0, (0.5, 0.5, 1.0, 0.0)),
    (-2.0, 1.0, (1 / 3, 2 / 3, 0.0, 0.0)),
])
def test_relu_relaxation_examples(l, u, expected):
    got = relu_relaxation(l, u)
    np.testing.assert_allclose(got, expected, atol=1e-15)
    us, ui, ls, li = got
    z = np.linspace(l, u, 10001)
    r = np.maximum(z, 0)
    assert np.all(ls * z + li <= r + 1e-12)
    assert np.all(r <= us * z + ui + 1e-12)


def test_relu_relaxation_invalid():
    with pytest.raises(InvalidInterval):
        relu_relaxation(1.0, 0.0)


@given(st.floats(-50, 50), st.floats(0, 50))
def test_relu_relaxation_envelope(l, width):
    u = l + width
    us, ui, ls, li = relu_relaxation(l, u)
    z = np.linspace(l, u, 201)
    r = np.maximum(z, 0)
    tol = 1e-9 * (1 + abs(l) + abs(u))
    assert np.all(ls * z + li <= r + tol)
    assert np.all(r <= us * z + ui + tol)


def test_affine_bounds_exact(rng):
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    net = Network((Layer(W, b, "identity"),))
    x0 = rng.normal(size=4)
    lb = linear_outer_bounds(net, x0, PerturbationSpec(INF, 0.5))
    np.testing.assert_allclose(lb.lower_matrix, W)
    np.testing.assert_allclose(lb.upper_matrix, W)
    np.testing.assert_allclose(lb.lower_offset, W @ x0 + b)
    np.testing.assert_allclose(lb.upper_offset, W @ x0 + b)


def test_one_d_relu_bounds():
    net = Network((Layer([[1.0]], [0.0], "relu"), Layer([[1.0]], [0.0], "identity")))
    lb = linear_outer_bounds(net, np.zeros(1), PerturbationSpec(INF, 1.0))
    np.testing.assert_allclose([lb.lower_matrix[0, 0], lb.lower_offset[0]], [1.0, 0.0])
    np.testing.assert_allclose([lb.upper_matrix[0, 0], lb.upper_offset[0]], [0.5, 0.5])


@pytest.mark.parametrize("p", [2, INF])
def test_outer_bounds_sound(rng, p):
    for _ in range(5):
        net = random_net(rng, 3, (6, 6), 3)
        x0 = rng.normal(size=3)
        lb = linear_outer_bounds(net, x0, PerturbationSpec(p, 0.4))
        dx = sample_ball(rng, 1000, 3, 0.4, p)
        f = forward(net, x0 + dx)
        assert np.all(f >= dx @ lb.lower_matrix.T + lb.lower_offset - 1e-9)
        assert np.all(f <= dx @ lb.upper_matrix.T + lb.upper_offset + 1e-9)


def test_affine_margin_coefficients():
    net = Network((Layer(np.eye(2), np.zeros(2), "identity"),))
    mc = margin_coefficients(net, np.array([2.0, 0.0]), 0, PerturbationSpec(INF, 0.1))
    np.testing.assert_allclose(mc.L_hat, [[1.0, -1.0]])
    np.testing.assert_allclose(mc.c_hat, [2.0])


def test_margin_lower_bound_examples():
    mc = MarginCoefficients(np.array([[1.0, -1.0]]), np.array([2.0]), 0)
    assert margin_lower_bound(mc, PerturbationSpec(INF, 0.5))[0] == 1.0
    assert margin_lower_bound(mc, PerturbationSpec(INF, 0.0))[0] == 2.0
    mc2 = MarginCoefficients(np.array([[3.0, 4.0]]), np.array([6.0]), 0)
    assert margin_lower_bound(mc2, PerturbationSpec(2, 1.0))[0] == 1.0


def test_margin_equals_margin_network_lower_bound(rng):
    net = random_net(rng, 3, (5,), 4)
    x0 = rng.normal(size=3)
    spec = PerturbationSpec(INF, 0.2)
    mc = margin_coefficients(net, x0, 2, spec)
    lb = linear_outer_bounds(margin_network(net, 2), x0, spec)
    np.testing.assert_allclose(mc.L_hat, lb.lower_matrix, atol=1e-12)
    np.testing.assert_allclose(mc.c_hat, lb.lower_offset, atol=1e-12)


def test_margin_monotone_in_eps(rng):
    net = random_net(rng, 3, (6, 5), 3)
    X = rng.normal(size=(20, 3))
    y = rng.integers(0, 3, size=20)
    prev = None
    for eps in [0.0, 0.05, 0.1, 0.2, 0.4]:
        m = margin_coefficient_set(net, X, y, PerturbationSpec(INF, eps)).margins()
        if prev is not None:
            assert np.all(m <= prev + 1e-10)
        prev = m


def test_margin_scale_invariance(rng):
    net = random_net(rng, 3, (5,), 3)
    X = rng.normal(size=(10, 3))
    y = rng.integers(0, 3, size=10)
    spec = PerturbationSpec(INF, 0.1)
    m1 = margin_coefficient_set(net, X, y, spec).margins()
    m3 = margin_coefficient_set(scale_network(net, 3.0), X, y, spec).margins()
    np.testing.assert_allclose(m3, 3.0 * m1, rtol=1e-12, atol=1e-12)


def test_zero_eps_margins_are_clean_margins(rng):
    net = random_net(rng, 3, (5,), 3)
    X = rng.normal(size=(10, 3))
    y = rng.integers(0, 3, size=10)
    m = margin_coefficient_set(net, X, y, PerturbationSpec(INF, 0.0)).margins()
    f = forward(net, X)
    for k in range(10):
        others = [c for c in range(3) if c != y[k]]
        np.testing.assert_allclose(m[k], f[k, y[k]] - f[k, others], atol=1e-12)


def _cs(c_values):
    c = np.asarray(c_values, dtype=float).reshape(-1, 1)
    return CoefficientSet(np.zeros((c.shape[0], 1, 2)), c, np.zeros(c.shape[0], int),
                          PerturbationSpec(INF, 0.1), "ab" * 32)


def test_normalizer_examples():
    assert compute_normalizer(_cs([5, 5, 5])) == 5.0
    assert compute_normalizer(_cs([2, 4])) == 3.0
    with pytest.raises(NormalizerDegenerate):
        compute_normalizer(_cs([-1, 1]))
    with pytest.raises(NormalizerDegenerate):
        compute_normalizer(_cs([-3, -1]))


def test_normalize_examples():
    mc = MarginCoefficients(np.array([[2.0, -2.0]]), np.array([4.0]), 0)
    out = normalize_coefficients(mc, 2.0)
    np.testing.assert_array_equal(out.L_hat, [[1.0, -1.0]])
    np.testing.assert_array_equal(out.c_hat, [2.0])
    same = normalize_coefficients(mc, 1.0)
    np.testing.assert_array_equal(same.L_hat, mc.L_hat)
    with pytest.raises(NormalizerDegenerate):
        normalize_coefficients(mc, 0.0)


@pytest.mark.parametrize("p", [2, INF])
def test_bounds_cache_round_trip(tmp_path, rng, p):
    net = random_net(rng, 3, (5,), 4)
    X = rng.normal(size=(12, 3))
    y = rng.integers(0, 4, size=12)
    raw = margin_coefficient_set(net, X, y, PerturbationSpec(p, 0.15))
    for cs in (raw, normalize_coefficients(raw, 1.7)):
        write_bounds_cache(cs, tmp_path / "c.rbbc")
        back = read_bounds_cache(tmp_path / "c.rbbc")
        assert back.L_hat.tobytes() == cs.L_hat.tobytes()
        assert back.c_hat.tobytes() == cs.c_hat.tobytes()
        np.testing.assert_array_equal(back.labels, cs.labels)
        assert back.spec == cs.spec and back.model_id == cs.model_id
        assert back.normalized == cs.normalized and back.Z == cs.Z
