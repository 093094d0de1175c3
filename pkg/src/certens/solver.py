"""Exact coordinate descent for the simplex-constrained hinge objective.

Updating weight ``t`` to ``x`` while scaling all other weights by
``(1 - x) / S`` turns every term into a 1-D piecewise-linear function

    g_i(x) = sum_l |x * omega_il + nu_il| + gamma_i * x + mu_i

and the objective into ``sum_i max(g_i(x), 0)``. ``one_step_update`` finds
its minimum on ``[0, 1]`` by sweeping the merged breakpoints once while
keeping each term's current slope and intercept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMass, InvalidInput, MonotonicityViolation, SolverInconsistency
from .problem import WeightVector, as_alpha, robboost_loss

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
TIE_TOL = 1e-15
MONOTONE_TOL = 1e-9


@dataclass(frozen=True)
class OneDimSubproblem:
    omega: np.ndarray
    nu: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    t: int
    remaining_mass: float
    direction: np.ndarray
    degenerate: bool = False

    def weights(self, x):
        """Full weight vector with ``alpha_t = x`` and the others rescaled."""
        w = (1.0 - x) * self.direction
        w[self.t] = x
        return w

    def values(self, x):
        """Inner value of every term at ``alpha_t = x``."""
        return np.abs(x * self.omega + self.nu).sum(axis=1) + self.gamma * x + self.mu


def rescale_coefficients(problem, alpha, t, hinge_offset=1.0):
    """Per-term ``(omega, nu, gamma, mu)`` for a move along coordinate ``t``.

    When the other weights carry (numerically) no mass they are replaced by
    a uniform split of ``1 - alpha_t``; ``degenerate`` is then set.
    """
    a = as_alpha(alpha)
    T = a.size
    if not 0 <= t < T:
        raise InvalidInput(f"coordinate {t} out of range for T={T}")
    rest = a.copy()
    rest[t] = 0.0
    S = float(rest.sum())
    degenerate = S <= MASS_TOL
    if degenerate:
        if T == 1:
            raise DegenerateMass("a single model has no other weights to rescale")
        direction = np.full(T, 1.0 / (T - 1))
        direction[t] = 0.0
        v_over_s = problem.A_bar @ direction
        u_over_s = problem.c_bar @ direction
    else:
        direction = rest / S
        v_over_s = (problem.A_bar @ rest) / S
        u_over_s = (problem.c_bar @ rest) / S
    omega = problem.A_bar[:, :, t] - v_over_s
    nu = v_over_s
    gamma = -problem.c_bar[:, t] + u_over_s
    mu = hinge_offset - u_over_s
    return OneDimSubproblem(omega, nu, gamma, mu, t, S, direction, degenerate)


def _breakpoints(omega, nu):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(omega != 0, -nu / np.where(omega != 0, omega, 1.0), np.inf)
    inside = (omega != 0) & (r > 0) & (r < 1)
    return r, inside


def breakpoints(omega, nu):
    """Sorted roots of ``x * omega_l + nu_l`` lying strictly inside ``(0, 1)``."""
    r, inside = _breakpoints(np.atleast_1d(np.asarray(omega, dtype=np.float64)),
                             np.atleast_1d(np.asarray(nu, dtype=np.float64)))
    vals = r[inside]
    return vals[np.argsort(vals, kind="stable")]


def one_step_update(problem, alpha, t, hinge_offset=1.0, debug=False):
    """Exact minimiser of the rescaled objective over ``alpha_t in [0, 1]``.

    Returns ``(alpha_t, loss)``. Among equal losses the smallest ``alpha_t``
    found by the sweep is kept.
    """
    a = as_alpha(alpha)
    if a.size == 1:
        return 1.0, robboost_loss(problem, a, hinge_offset)
    if len(problem) == 0:
        return float(a[t]), 0.0
    sub = rescale_coefficients(problem, a, t, hinge_offset)
    om, nu = sub.omega, sub.nu

    # sign sets at x = 0; a zero entry takes the sign it has just after 0
    pos = (nu > 0) | ((nu == 0) & (om > 0))
    neg = (nu < 0) | ((nu == 0) & (om < 0))
    slope = (om * pos).sum(axis=1) - (om * neg).sum(axis=1) + sub.gamma
    icept = (nu * pos).sum(axis=1) - (nu * neg).sum(axis=1) + sub.mu
    # crossing its root flips an entry's sign: negative -> +2x, positive -> -2x
    flip = np.where(neg, 2.0, np.where(pos, -2.0, 0.0))

    r, inside = _breakpoints(om, nu)
    term_of, elem_of = np.nonzero(inside)
    rv = r[term_of, elem_of]
    order = np.argsort(rv, kind="stable")
    rv, term_of, elem_of = rv[order], term_of[order], elem_of[order]

    with np.errstate(divide="ignore", invalid="ignore"):
        z = -icept / slope
    cross = np.where((slope != 0) & (z > 0), z, np.inf)

    def evaluate(x):
        vals = slope * x + icept
        if debug:
            direct = sub.values(x)
            err = np.max(np.abs(vals - direct))
            if err > 1e-8 * (1.0 + np.max(np.abs(direct))):
                raise SolverInconsistency(f"effective pieces off by {err:.3g} at x={x}")
        return float(np.maximum(vals, 0.0).sum())

    best_x, best_loss = 0.0, evaluate(0.0)
    last_x = 0.0
    i, D = 0, rv.size
    while True:
        next_r = rv[i] if i < D else 1.0
        m = int(np.argmin(cross))
        if cross[m] < next_r:
            x = float(cross[m])
            cross[m] = np.inf
        elif i < D:
            x = float(next_r)
            while i < D and rv[i] - x <= TIE_TOL:
                k, l = term_of[i], elem_of[i]
                slope[k] += flip[k, l] * om[k, l]
                icept[k] += flip[k, l] * nu[k, l]
                if slope[k] != 0 and -icept[k] / slope[k] > rv[i]:
                    cross[k] = -icept[k] / slope[k]
                else:
                    cross[k] = np.inf
                i += 1
        else:
            x = 1.0
        if x - last_x > TIE_TOL or x == 1.0:
            loss = evaluate(x)
            if loss < best_loss:
                best_x, best_loss = x, loss
            last_x = x
        if x == 1.0 and i >= D:
            break
    return best_x, best_loss


@dataclass(frozen=True)
class ReferenceResult:
    alpha_t: float
    loss: float
    grid_alpha_t: float
    grid_loss: float
    candidates: np.ndarray = field(repr=False)


def _direct_loss(problem, W, hinge_offset):
    """Objective at each row of ``W`` (``m x T``), recomputed from scratch."""
    n, d, T = problem.A_bar.shape
    z = problem.A_bar.reshape(n * d, T) @ W.T
    inner = np.abs(z).reshape(n, d, -1).sum(axis=1)
    inner = inner - problem.c_bar @ W.T + hinge_offset
    return np.maximum(inner, 0.0).sum(axis=0)


def _direction(a, t):
    T = a.size
    rest = a.copy()
    rest[t] = 0.0
    S = rest.sum()
    if S <= MASS_TOL:
        rest = np.full(T, 1.0 / (T - 1))
        rest[t] = 0.0
        return rest
    return rest / S


def one_step_update_reference(problem, alpha, t, hinge_offset=1.0, grid_points=100_001,
                              chunk=10_000):
    """Brute-force counterpart of :func:`one_step_update`.

    Candidate points are derived from the full weight vector
    ``w(x) = x e_t + (1 - x) beta`` without the slope/intercept sweep:
    roots of each entry of ``A_bar w(x)``, zero crossings of each term
    located by direct evaluation on its pieces, and the two ends. A dense
    uniform grid is evaluated as well.
    """
    a = as_alpha(alpha)
    T = a.size
    if T == 1:
        loss = robboost_loss(problem, a, hinge_offset)
        return ReferenceResult(1.0, loss, 1.0, loss, np.array([1.0]))
    beta = _direction(a, t)

    def W(xs):
        xs = np.asarray(xs, dtype=np.float64)
        w = np.outer(1.0 - xs, beta)
        w[:, t] = xs
        return w

    # entries of A_bar w(x) are affine in x: value at 0 and at 1
    z0 = problem.A_bar @ beta
    z1 = problem.A_bar[:, :, t]
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = z0 / (z0 - z1)
    ok = (z0 != z1) & (roots > 0) & (roots < 1)
    cands = [0.0, 1.0]
    for i in range(len(problem)):
        knots = np.unique(np.r_[0.0, roots[i][ok[i]], 1.0])
        vals = _direct_loss_terms(problem, i, W(knots), hinge_offset)
        cands.extend(knots[1:-1])
        for lo, hi, vlo, vhi in zip(knots, knots[1:], vals, vals[1:]):
            if (vlo < 0 < vhi) or (vhi < 0 < vlo):
                cands.append(lo + (hi - lo) * vlo / (vlo - vhi))
    cands = np.unique(np.asarray(cands))
    losses = _direct_loss(problem, W(cands), hinge_offset)
    best = int(np.argmin(losses))

    grid_best_x, grid_best = 0.0, np.inf
    if grid_points:
        xs = np.linspace(0.0, 1.0, grid_points)
        for s in range(0, xs.size, chunk):
            gl = _direct_loss(problem, W(xs[s:s + chunk]), hinge_offset)
            g = int(np.argmin(gl))
            if gl[g] < grid_best:
                grid_best, grid_best_x = float(gl[g]), float(xs[s + g])
    return ReferenceResult(float(cands[best]), float(losses[best]), grid_best_x, grid_best,
                           cands)


def _direct_loss_terms(problem, i, W, hinge_offset):
    inner = np.abs(problem.A_bar[i] @ W.T).sum(axis=0)
    return inner - W @ problem.c_bar[i] + hinge_offset


@dataclass
class CDResult:
    alpha: WeightVector
    trace: list
    updates: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def loss(self):
        return self.trace[-1]


def coordinate_descent(problem, alpha0=None, epochs=3, seed=0, order="random",
                       hinge_offset=1.0, debug=False):
    """Run ``epochs`` sweeps of exact coordinate updates from ``alpha0``.

    ``trace[0]`` is the starting loss and each later entry the loss after one
    coordinate update; ``history`` holds the matching weight vectors. Weights
    stay on the simplex after every update.
    """
    T = problem.T
    a = np.array(as_alpha(WeightVector.uniform(T) if alpha0 is None else alpha0))
    if a.size != T:
        raise InvalidInput(f"alpha has {a.size} entries, problem has T={T}")
    if order not in ("random", "cyclic"):
        raise InvalidInput(f"unknown coordinate order {order!r}")
    loss = robboost_loss(problem, a, hinge_offset)
    trace, updates, history = [loss], [], [a.copy()]
    if T == 1:
        return CDResult(WeightVector(a), trace, updates, history)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        coords = rng.permutation(T) if order == "random" else np.arange(T)
        for t in coords:
            t = int(t)
            x, _ = one_step_update(problem, a, t, hinge_offset, debug=debug)
            new = np.clip((1.0 - x) * _direction(a, t), 0.0, 1.0)
            new[t] = x
            new /= new.sum()
            new_loss = robboost_loss(problem, new, hinge_offset)
            if new_loss > loss + MONOTONE_TOL:
                raise MonotonicityViolation(
                    f"loss rose from {loss!r} to {new_loss!r} updating coordinate {t}")
            a = np.array(WeightVector(new).alpha)
            loss = new_loss
            trace.append(loss)
            updates.append((t, x))
            history.append(a.copy())
        log.debug("epoch %d loss %.6g", epoch, loss)
    return CDResult(WeightVector(a), trace, updates, history)
