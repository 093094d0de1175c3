"""Sequential training of base models against a frozen ensemble prefix.

The ensemble after ``m`` rounds is the unit-weight sum of its members, so
its certified margin uses the summed raw coefficients of the frozen models
plus those of the model being trained. Gradients of the surrogate loss with
respect to the new model's parameters are taken by central differences,
which is affordable only for tiny networks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bounds import dual_norm, margin_coefficient_set
from .errors import InvalidInput, NumericalFailure, TooLargeForFD, TrainingDiverged
from .evaluate import targeted_verified_error, verified_error
from .network import init_network

log = logging.getLogger(__name__)

SURROGATES = ("hinge", "softplus")
FD_MAX_PARAMS = 2000


@dataclass(frozen=True)
class FrozenPrefix:
    """Summed raw coefficients of the first ``m`` ensemble members."""

    L_sum: np.ndarray
    c_sum: np.ndarray
    m: int = 0

    @classmethod
    def empty(cls, n_examples, num_classes, dim):
        return cls(np.zeros((n_examples, num_classes - 1, dim)),
                   np.zeros((n_examples, num_classes - 1)), 0)

    def add(self, coeffs):
        if coeffs.normalized:
            raise InvalidInput("the prefix accumulates raw coefficients")
        return FrozenPrefix(self.L_sum + coeffs.L_hat, self.c_sum + coeffs.c_hat, self.m + 1)


def gb_margin(prefix, new_coeffs, spec):
    L = np.asarray(prefix.L_sum) + np.asarray(new_coeffs.L_hat)
    c = np.asarray(prefix.c_sum) + np.asarray(new_coeffs.c_hat)
    return c - spec.epsilon * dual_norm(L, spec.dual_q)


def surrogate_values(margins, surrogate):
    if surrogate == "hinge":
        return np.maximum(1.0 - margins, 0.0)
    if surrogate == "softplus":
        return np.logaddexp(0.0, -margins)
    raise InvalidInput(f"unknown surrogate {surrogate!r}")


def _coeffs(net, dataset, spec):
    return margin_coefficient_set(net, dataset.examples, dataset.labels, spec, model_id="")


def gb_loss(prefix, net, dataset, spec, surrogate="softplus"):
    margins = gb_margin(prefix, _coeffs(net, dataset, spec), spec)
    loss = float(surrogate_values(margins, surrogate).sum())
    if not np.isfinite(loss):
        raise NumericalFailure(f"non-finite surrogate loss {loss}")
    return loss


def _trainable(net):
    """Mask of parameters that may move (masked-out input columns stay zero)."""
    mask = np.ones(net.num_parameters, dtype=bool)
    if net.feature_mask is not None:
        first = net.layers[0]
        keep = np.zeros(first.n_in, dtype=bool)
        keep[list(net.feature_mask)] = True
        mask[:first.weight.size] = np.broadcast_to(keep, first.weight.shape).ravel()
    return mask


def gb_gradient(prefix, net, dataset, spec, surrogate="softplus"):
    """Central finite-difference gradient of the softplus loss.

    The step for parameter ``theta_i`` is ``1e-5 * (1 + |theta_i|)``.
    """
    if surrogate != "softplus":
        raise InvalidInput("finite-difference gradients need the smooth softplus surrogate")
    if net.num_parameters > FD_MAX_PARAMS:
        raise TooLargeForFD(f"{net.num_parameters} parameters > {FD_MAX_PARAMS}")
    theta = net.parameters()
    grad = np.zeros_like(theta)
    for i in np.flatnonzero(_trainable(net)):
        h = 1e-5 * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp = gb_loss(prefix, net.with_parameters(tp), dataset, spec, surrogate)
        lm = gb_loss(prefix, net.with_parameters(tm), dataset, spec, surrogate)
        grad[i] = (lp - lm) / (2.0 * h)
    return grad


@dataclass
class GBResult:
    models: list
    metrics: list = field(default_factory=list)
    prefix: FrozenPrefix | None = None


def _train_round(prefix, net, dataset, spec, steps, step_size, surrogate):
    """Gradient descent with step halving; the loss never increases."""
    loss = gb_loss(prefix, net, dataset, spec, surrogate)
    lr = step_size
    for _ in range(steps):
        grad = gb_gradient(prefix, net, dataset, spec, surrogate)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged("non-finite gradient")
        theta = net.parameters()
        for _ in range(30):
            cand = net.with_parameters(theta - lr * grad)
            cand_loss = gb_loss(prefix, cand, dataset, spec, surrogate)
            if cand_loss < loss:
                net, loss = cand, cand_loss
                break
            lr *= 0.5
        else:
            break
    return net, loss


def gb_train(dataset, spec, rounds=3, hidden=(8,), seed=0, steps=40, step_size=0.5,
             surrogate="softplus"):
    """Train ``rounds`` models one after another, each against the frozen sum.

    Each new model starts from a seeded random hidden layer and a zero
    output layer, so it initially leaves the ensemble unchanged.
    """
    if surrogate != "softplus":
        raise InvalidInput("training uses the softplus surrogate")
    prefix = FrozenPrefix.empty(len(dataset), dataset.num_classes, dataset.dim)
    models, metrics = [], []
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        net = init_network(dataset.dim, hidden, dataset.num_classes, rng,
                           dataset.feature_mask, zero_output=True)
        net, loss = _train_round(prefix, net, dataset, spec, steps, step_size, surrogate)
        prefix = prefix.add(_coeffs(net, dataset, spec))
        margins = prefix.c_sum - spec.epsilon * dual_norm(prefix.L_sum, spec.dual_q)
        row = {
            "round": r + 1,
            "surrogate_loss": loss,
            "targeted_verified_error": targeted_verified_error(margins),
            "verified_error": verified_error(margins),
        }
        log.info("round %d: %s", r + 1, row)
        models.append(net)
        metrics.append(row)
    return GBResult(models, metrics, prefix)
