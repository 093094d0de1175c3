import numpy as np
import pytest

from certens.errors import DegenerateMass, MonotonicityViolation
from certens.problem import BoostProblem, WeightVector, robboost_loss, term_values
from certens.solver import (
    breakpoints,
    coordinate_descent,
    one_step_update,
    one_step_update_reference,
    rescale_coefficients,
)


def problem(A, c):
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    n = A.shape[0]
    return BoostProblem(A, c, np.stack([np.arange(n), np.zeros(n, int)], axis=1))


def random_problem(rng, n, d, T, scale=0.5, shift=0.5):
    return problem(rng.normal(0, scale, size=(n, d, T)), rng.normal(size=(n, T)) + shift)


SPEC_EXAMPLE = problem([[[1.0, 2.0]]], [[1.0, 1.0]])


def test_rescale_example():
    sub = rescale_coefficients(SPEC_EXAMPLE, [0.5, 0.5], 0)
    assert sub.remaining_mass == 0.5
    np.testing.assert_allclose(sub.omega, [[-1.0]])
    np.testing.assert_allclose(sub.nu, [[2.0]])
    np.testing.assert_allclose(sub.gamma, [0.0])
    np.testing.assert_allclose(sub.mu, [0.0])


def test_rescale_matches_direct_values(rng):
    for _ in range(20):
        T = int(rng.integers(2, 6))
        prob = random_problem(rng, 10, 4, T)
        a = rng.dirichlet(np.ones(T))
        t = int(rng.integers(T))
        sub = rescale_coefficients(prob, a, t)
        for x in np.linspace(0, 1, 101):
            np.testing.assert_allclose(sub.values(x), term_values(prob, sub.weights(x)),
                                       atol=1e-10, rtol=0)


def test_degenerate_mass_uses_uniform_direction():
    prob = problem(np.ones((1, 1, 3)), np.ones((1, 3)))
    sub = rescale_coefficients(prob, [1.0, 0.0, 0.0], 0)
    assert sub.degenerate
    np.testing.assert_allclose(sub.weights(0.0), [0.0, 0.5, 0.5])
    with pytest.raises(DegenerateMass):
        rescale_coefficients(problem(np.ones((1, 1, 1)), np.ones((1, 1))), [1.0], 0)


@pytest.mark.parametrize("omega,nu,expected", [
    ([2.0], [-1.0], [0.5]),
    ([1.0], [2.0], []),
    ([0.0], [7.0], []),
    ([1.0, -4.0, 2.0], [-0.75, 1.0, -0.5], [0.25, 0.25, 0.75]),
])
def test_breakpoints_examples(omega, nu, expected):
    np.testing.assert_allclose(breakpoints(omega, nu), expected)


def test_one_step_monotone_piece():
    # with the +1 offset folded into mu the inner value is 2 - x on [0, 1]
    x, loss = one_step_update(SPEC_EXAMPLE, [0.5, 0.5], 0)
    assert x == 1.0 and loss == pytest.approx(1.0)


def test_one_step_vertex_at_breakpoint():
    # alpha_0 = x, alpha_1 = 1 - x: inner = |2x - 1|
    prob = problem([[[1.0, -1.0]]], [[0.0, 0.0]])
    sub = rescale_coefficients(prob, [0.5, 0.5], 0, hinge_offset=0.0)
    np.testing.assert_allclose([sub.omega[0, 0], sub.nu[0, 0]], [2.0, -1.0])
    x, loss = one_step_update(prob, [0.5, 0.5], 0, hinge_offset=0.0)
    assert x == pytest.approx(0.5) and loss == pytest.approx(0.0, abs=1e-15)


def test_one_step_matches_reference(rng):
    for _ in range(60):
        T = int(rng.integers(2, 6))
        prob = random_problem(rng, int(rng.integers(1, 21)), int(rng.integers(1, 9)), T)
        a = rng.dirichlet(np.ones(T))
        t = int(rng.integers(T))
        x, loss = one_step_update(prob, a, t, debug=True)
        ref = one_step_update_reference(prob, a, t, grid_points=2001)
        assert abs(loss - ref.loss) <= 1e-8
        assert loss <= ref.grid_loss + 1e-8


def test_one_step_single_model():
    prob = problem(np.ones((2, 1, 1)), np.ones((2, 1)))
    assert one_step_update(prob, [1.0], 0)[0] == 1.0


def test_cd_single_model_unchanged():
    prob = problem(np.ones((2, 1, 1)), np.ones((2, 1)))
    res = coordinate_descent(prob, epochs=3)
    np.testing.assert_array_equal(res.alpha.alpha, [1.0])
    assert res.updates == []


def test_cd_trace_and_simplex(rng):
    for _ in range(10):
        T = int(rng.integers(2, 6))
        prob = random_problem(rng, 30, 4, T)
        res = coordinate_descent(prob, epochs=4, seed=int(rng.integers(1000)))
        assert np.all(np.diff(res.trace) <= 1e-9)
        assert res.loss <= robboost_loss(prob, WeightVector.uniform(T)) + 1e-12
        a = res.alpha.alpha
        assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-12


def test_cd_finds_dominant_model(rng):
    # model 0 certifies every term by a wide margin; the others are pure noise
    n, d, T = 25, 3, 4
    A = rng.normal(0, 1.0, size=(n, d, T))
    A[:, :, 0] = 0.0
    c = rng.normal(0, 0.1, size=(n, T))
    c[:, 0] = 5.0
    res = coordinate_descent(problem(A, c), epochs=3, seed=0)
    assert res.alpha.alpha[0] >= 1 - 1e-6


def test_cd_cyclic_is_deterministic(rng):
    prob = random_problem(rng, 15, 3, 3)
    a = coordinate_descent(prob, epochs=2, order="cyclic")
    b = coordinate_descent(prob, epochs=2, order="cyclic")
    np.testing.assert_array_equal(a.alpha.alpha, b.alpha.alpha)
    assert [t for t, _ in a.updates] == [0, 1, 2, 0, 1, 2]
