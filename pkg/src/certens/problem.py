"""Ensemble-weight objective over the simplex in its reindexed l-inf form.

Each retained (example ``k``, target ``j``) pair contributes a term with a
``d x T`` matrix ``A_bar`` (epsilon folded in) and a ``T``-vector ``c_bar``,
so that the ensemble's certified margin is ``-||A_bar a||_1 + c_bar . a``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CacheFormatError, InvalidInput, UnsupportedNorm

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class WeightVector:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64).ravel()
        if a.size == 0 or np.any(a < 0) or np.any(a > 1) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInput(f"weights are not on the simplex: {a}")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @classmethod
    def uniform(cls, T):
        return cls(np.full(T, 1.0 / T))

    def __len__(self):
        return self.alpha.size


def as_alpha(alpha):
    if isinstance(alpha, WeightVector):
        return alpha.alpha
    return WeightVector(alpha).alpha


@dataclass(frozen=True)
class BoostTerm:
    k: int
    j: int
    A_bar: np.ndarray
    c_bar: np.ndarray


@dataclass(frozen=True)
class BoostProblem:
    """All retained terms stacked: ``A_bar`` is ``(n, d, T)``, ``c_bar`` ``(n, T)``.

    ``keys[i] = (k, j)`` identifies the example and target of term ``i``.
    """

    A_bar: np.ndarray
    c_bar: np.ndarray
    keys: np.ndarray
    epsilon: float = 1.0
    elimination_stats: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.A_bar.shape[2]

    @property
    def d(self):
        return self.A_bar.shape[1]

    def __len__(self):
        return self.A_bar.shape[0]

    def term(self, i):
        k, j = self.keys[i]
        return BoostTerm(int(k), int(j), self.A_bar[i], self.c_bar[i])

    def subset(self, mask):
        mask = np.asarray(mask)
        return replace(self, A_bar=self.A_bar[mask], c_bar=self.c_bar[mask],
                       keys=self.keys[mask])


def _check_sets(sets, require_normalized):
    sets = list(sets)
    if not sets:
        raise InvalidInput("need at least one model")
    ref = sets[0]
    for cs in sets:
        if cs.spec.p != np.inf:
            raise UnsupportedNorm(f"the simplex solver needs p=inf, got p={cs.spec.p}")
        if require_normalized and not cs.normalized:
            raise InvalidInput(f"coefficients of model {cs.model_id[:12]} are not normalized")
        if cs.L_hat.shape != ref.L_hat.shape:
            raise InvalidInput(f"shape mismatch {cs.L_hat.shape} vs {ref.L_hat.shape}")
        if not np.array_equal(cs.labels, ref.labels):
            raise InvalidInput("coefficient sets were computed on different labels")
        if cs.spec.epsilon != ref.spec.epsilon:
            raise InvalidInput("coefficient sets were computed at different epsilons")
    return sets


def assemble(sets, spec=None, require_normalized=True):
    """Reindex per-model coefficient sets into one ``BoostProblem``."""
    sets = _check_sets(sets, require_normalized)
    eps = sets[0].spec.epsilon if spec is None else spec.epsilon
    if spec is not None and spec.p != np.inf:
        raise UnsupportedNorm(f"the simplex solver needs p=inf, got p={spec.p}")
    L = np.stack([cs.L_hat for cs in sets], axis=-1)  # (N, C-1, d, T)
    c = np.stack([cs.c_hat for cs in sets], axis=-1)  # (N, C-1, T)
    n, m, d, T = L.shape
    A_bar = eps * L.reshape(n * m, d, T)
    c_bar = c.reshape(n * m, T).copy()
    kk, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    keys = np.stack([kk.ravel(), jj.ravel()], axis=1)
    return BoostProblem(A_bar, c_bar, keys, eps)


def single_model_margins(problem):
    """``(T, n_terms)`` certified margin of each model alone on every term."""
    return -np.abs(problem.A_bar).sum(axis=1).T + problem.c_bar.T


def eliminate(problem, margins=None, drop_unimprovable=True):
    """Drop pairs certified by every model and (optionally) by none.

    ``margins`` is ``(T, N, C-1)``; by default each model's margin is read
    off the problem itself (one-hot weights). Dropping pairs that no single model
    certifies is a heuristic: a weighted combination can still cancel
    their noise. ``drop_unimprovable=False`` keeps them.
    """
    k, j = problem.keys[:, 0], problem.keys[:, 1]
    if margins is None:
        pm = single_model_margins(problem)
        n_examples = int(k.max()) + 1 if len(problem) else 0
    else:
        margins = np.asarray(margins, dtype=np.float64)
        pm = margins[:, k, j]  # (T, n_terms)
        n_examples = margins.shape[1]
    all_robust = np.all(pm > 0, axis=0)
    none_robust = np.all(pm <= 0, axis=0)
    removed = all_robust | (none_robust if drop_unimprovable else False)
    retained = ~removed

    ex_robust = np.ones(n_examples, dtype=bool)
    ex_touched = np.zeros(n_examples, dtype=bool)
    ex_retained = np.zeros(n_examples, dtype=bool)
    np.logical_and.at(ex_robust, k, all_robust)
    np.logical_or.at(ex_touched, k, True)
    np.logical_or.at(ex_retained, k, retained)
    ex_robust &= ex_touched
    stats = {
        "removed_all_robust": int(all_robust.sum()),
        "removed_none_robust": int((removed & ~all_robust).sum()),
        "retained": int(retained.sum()),
        "pairs_total": int(len(problem)),
        "examples_total": int(ex_touched.sum()),
        "examples_all_robust": int(ex_robust.sum()),
        "examples_eliminated_other": int((ex_touched & ~ex_retained & ~ex_robust).sum()),
        "examples_retained": int(ex_retained.sum()),
        "drop_unimprovable": bool(drop_unimprovable),
    }
    return replace(problem.subset(retained), elimination_stats=stats)


def ensemble_margin(term, alpha):
    """``-||A_bar a||_1 + c_bar . a`` for one term, or per term of a problem."""
    a = as_alpha(alpha)
    A, c = np.asarray(term.A_bar), np.asarray(term.c_bar)
    return -np.abs(A @ a).sum(axis=-1) + c @ a


def term_values(problem, alpha, hinge_offset=1.0):
    """Inner (pre-hinge) value of every term: ``||A_bar a||_1 - c_bar . a + offset``."""
    a = np.asarray(alpha, dtype=np.float64)
    return np.abs(problem.A_bar @ a).sum(axis=-1) - problem.c_bar @ a + hinge_offset


def robboost_loss(problem, alpha, hinge_offset=1.0):
    """Hinge surrogate summed over all retained terms in storage order."""
    a = as_alpha(alpha)
    if len(problem) == 0:
        return 0.0
    return float(np.maximum(term_values(problem, a, hinge_offset), 0.0).sum())


# -- binary cache -------------------------------------------------------------
#
# magic "RBBP1" | T, d, n_terms u32 | per term: k, j u32, A_bar (d*T) f64, c_bar T f64.

_MAGIC = b"RBBP1"
_HEADER = struct.Struct("<5sIII")


def write_problem_cache(problem, path):
    n, d, T = problem.A_bar.shape
    rec = np.dtype([("k", "<u4"), ("j", "<u4"), ("A", "<f8", (d * T,)), ("c", "<f8", (T,))])
    recs = np.empty(n, dtype=rec)
    recs["k"] = problem.keys[:, 0]
    recs["j"] = problem.keys[:, 1]
    recs["A"] = problem.A_bar.reshape(n, d * T)
    recs["c"] = problem.c_bar
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, T, d, n))
        fh.write(recs.tobytes())


def read_problem_cache(path, epsilon=1.0):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, T, d, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    rec = np.dtype([("k", "<u4"), ("j", "<u4"), ("A", "<f8", (d * T,)), ("c", "<f8", (T,))])
    body = raw[_HEADER.size:]
    if len(body) != n * rec.itemsize:
        raise CacheFormatError(f"{path}: payload size mismatch")
    recs = np.frombuffer(body, dtype=rec, count=n)
    keys = np.stack([recs["k"], recs["j"]], axis=1).astype(np.int64)
    return BoostProblem(recs["A"].astype(np.float64).reshape(n, d, T),
                        recs["c"].astype(np.float64).reshape(n, T), keys, epsilon)
