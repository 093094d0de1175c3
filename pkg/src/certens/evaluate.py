"""Clean, PGD, verified and targeted verified error of weighted ensembles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import dual_norm
from .errors import EmptyDataset, InvalidInput, UnsupportedNorm
from .network import backprop, forward, target_index_map


def _margins_2d(margins):
    m = np.asarray(margins, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.shape[0] == 0:
        raise EmptyDataset("no examples")
    return m


def verified_error(margins):
    """Fraction of examples with at least one non-positive certified margin."""
    m = _margins_2d(margins)
    return np.count_nonzero(~np.all(m > 0, axis=1)) / m.shape[0]


def targeted_verified_error(margins):
    m = _margins_2d(margins)
    return np.count_nonzero(~(m > 0)) / m.size


def ensemble_certified_margins(sets, alpha, spec=None):
    """Certified margins ``(N, C-1)`` of ``sum_t alpha_t * model_t`` from coefficients.

    Pass normalized sets to bound the normalized ensemble.
    """
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.float64)
    if len(sets) != a.size:
        raise InvalidInput(f"{len(sets)} coefficient sets for {a.size} weights")
    spec = sets[0].spec if spec is None else spec
    L = sum(w * cs.L_hat for w, cs in zip(a, sets))
    c = sum(w * cs.c_hat for w, cs in zip(a, sets))
    return c - spec.epsilon * dual_norm(L, spec.dual_q)


def _scales(alpha, Z, T):
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.float64)
    z = np.ones(T) if Z is None else np.asarray(Z, dtype=np.float64)
    if a.size != T or z.size != T:
        raise InvalidInput(f"need {T} weights and normalizers")
    return a / z


def ensemble_logits(models, alpha, Z, x):
    scales = _scales(alpha, Z, len(models))
    return sum(s * forward(net, x) for s, net in zip(scales, models))


def clean_error(models, alpha, Z, dataset):
    if len(dataset) == 0:
        raise EmptyDataset("no examples")
    pred = np.argmax(ensemble_logits(models, alpha, Z, dataset.examples), axis=1)
    return np.count_nonzero(pred != dataset.labels) / len(dataset)


def _logit_margins(logits, labels):
    """``(N, C-1)`` logit gaps between the true class and every other class."""
    C = logits.shape[1]
    others = np.array([[target_index_map(j, y) for j in range(C - 1)] for y in labels],
                      dtype=np.int64).reshape(len(labels), C - 1)
    rows = np.arange(len(labels))[:, None]
    return logits[rows, labels[:, None]] - logits[rows, others], others


def pgd_error(models, alpha, Z, dataset, spec, steps=100, step_size=None, restarts=2, seed=0):
    """Fraction of examples for which a sign-gradient l-inf attack finds a
    point whose ensemble margin to some class is ``<= 0``.

    Every target class is attacked separately. Restart 0 starts at the clean
    input, later restarts at uniform random points of the ball. An example
    counts as broken if any visited iterate (the start included) is.
    """
    if spec.p != np.inf:
        raise UnsupportedNorm("PGD is implemented for p=inf only")
    if len(dataset) == 0:
        raise EmptyDataset("no examples")
    eps = spec.epsilon
    step = eps / 25.0 if step_size is None else step_size
    scales = _scales(alpha, Z, len(models))
    x0, y = dataset.examples, dataset.labels
    n, C = len(dataset), models[0].num_classes
    rng = np.random.default_rng(seed)
    rows = np.arange(n)

    def broken(x):
        m, _ = _logit_margins(ensemble_logits(models, alpha, Z, x), y)
        return np.any(m <= 0, axis=1)

    found = broken(x0)
    for r in range(max(restarts, 1)):
        start = x0 if r == 0 else x0 + rng.uniform(-eps, eps, size=x0.shape)
        for j in range(C - 1):
            target = np.array([target_index_map(j, int(k)) for k in y])
            g_logits = np.zeros((n, C))
            g_logits[rows, y] = 1.0
            g_logits[rows, target] -= 1.0
            x = start.copy()
            found |= broken(x)
            for _ in range(steps if eps > 0 else 0):
                grad = np.zeros_like(x)
                for s, net in zip(scales, models):
                    grad += backprop(net, x, s * g_logits)[1]
                x = np.clip(x - step * np.sign(grad), x0 - eps, x0 + eps)
                found |= broken(x)
    return np.count_nonzero(found) / n


def margin_histogram(margins, bins=20):
    """Uniform-bin histogram of all certified margins over ``[min, max]``."""
    if bins < 1:
        raise InvalidInput("bins must be >= 1")
    m = np.asarray(margins, dtype=np.float64).ravel()
    if m.size == 0:
        return {"edges": [], "counts": []}
    counts, edges = np.histogram(m, bins=bins, range=(m.min(), m.max()))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


@dataclass
class EvaluationReport:
    clean_error: float
    pgd_error: float | None
    verified_error: float
    targeted_verified_error: float
    margin_histogram: dict
    metadata: dict = field(default_factory=dict)
    elimination_stats: dict | None = None

    def to_dict(self):
        return asdict(self)


def evaluate_ensemble(models, alpha, norm_sets, dataset, spec, pgd=None, bins=20):
    """Full report for ``sum_t alpha_t * model_t / Z_t`` on ``dataset``.

    ``norm_sets`` are the models' normalized coefficient sets on ``dataset``;
    their ``Z`` values define the ensemble. ``pgd`` holds keyword arguments
    for :func:`pgd_error`; PGD is skipped for ``p != inf``.
    """
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.float64)
    Z = [cs.Z if cs.Z is not None else 1.0 for cs in norm_sets]
    margins = ensemble_certified_margins(norm_sets, a, spec)
    pgd_err = None
    if spec.p == np.inf:
        pgd_err = pgd_error(models, a, Z, dataset, spec, **(pgd or {}))
    return EvaluationReport(
        clean_error=clean_error(models, a, Z, dataset),
        pgd_error=pgd_err,
        verified_error=verified_error(margins),
        targeted_verified_error=targeted_verified_error(margins),
        margin_histogram=margin_histogram(margins, bins),
        metadata={"epsilon": spec.epsilon, "p": "inf" if spec.p == np.inf else spec.p,
                  "T": int(a.size), "alpha": a.tolist(), "Z": [float(z) for z in Z]},
    )
