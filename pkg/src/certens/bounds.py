"""Linear outer bounds and certified margin lower bounds for ReLU networks.

The bounds are built by a backward pass through per-neuron linear ReLU
relaxations (CROWN style). Every layer's pre-activation interval comes from
running the same backward pass on the corresponding network prefix. All
routines operate on a batch of anchor points; the single-anchor functions
are thin wrappers.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CacheFormatError,
    InvalidInput,
    InvalidInterval,
    NormalizerDegenerate,
    NumericalFailure,
)
from .network import network_to_dict, target_index_map

NORMS = {1: np.inf, 2: 2, np.inf: 1}
_P_CODES = {1: 1, 2: 2, np.inf: 0}
_P_FROM_CODE = {v: k for k, v in _P_CODES.items()}
Z_MIN = 1e-6


def parse_norm(p):
    if isinstance(p, str):
        p = p.strip().lower()
        p = np.inf if p in ("inf", "linf", "infinity") else float(p)
    p = float(p)
    if p not in NORMS:
        raise InvalidInput(f"norm order must be 1, 2 or inf, got {p}")
    return np.inf if math.isinf(p) else int(p)


@dataclass(frozen=True)
class PerturbationSpec:
    p: float = np.inf
    epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        eps = float(self.epsilon)
        if not eps >= 0 or not math.isfinite(eps):
            raise InvalidInput(f"epsilon must be finite and >= 0, got {self.epsilon}")
        object.__setattr__(self, "epsilon", eps)

    @property
    def dual_q(self):
        return NORMS[self.p]

    def with_epsilon(self, epsilon):
        return PerturbationSpec(self.p, epsilon)


def dual_norm(a, q):
    """``q``-norm along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    if q == 1:
        return np.abs(a).sum(axis=-1)
    if q == 2:
        return np.sqrt((a * a).sum(axis=-1))
    return np.abs(a).max(axis=-1, initial=0.0)


def relu_relaxation(l, u):
    """Linear envelope of relu on ``[l, u]``.

    Returns ``(upper_slope, upper_intercept, lower_slope, lower_intercept)``.
    For an unstable neuron the lower line is the adaptive choice: slope 1
    when ``u >= |l|``, slope 0 otherwise.
    """
    if l > u:
        raise InvalidInterval(f"l={l} > u={u}")
    us, ui, ls, li = _relax(np.array([l], dtype=np.float64), np.array([u], dtype=np.float64))
    return float(us[0]), float(ui[0]), float(ls[0]), float(li[0])


def _relax(l, u):
    u = np.maximum(u, l)
    active = l >= 0
    unstable = (l < 0) & (u > 0)
    width = np.where(unstable, u - l, 1.0)
    upper_slope = np.where(active, 1.0, np.where(unstable, u / width, 0.0))
    upper_int = np.where(unstable, -l * u / width, 0.0)
    lower_slope = np.where(active | (unstable & (u >= -l)), 1.0, 0.0)
    lower_int = np.zeros_like(l)
    return upper_slope, upper_int, lower_slope, lower_int


def _backward(layers, relaxations, depth, A, bias):
    """Push ``A @ h_depth + bias`` back to the input.

    ``h_depth`` is the input of ``layers[depth]``; ``relaxations[i]`` holds
    the relu envelope of layer ``i``'s pre-activation. Returns lower and
    upper ``(coeff, offset)`` pairs expressed in terms of the network input.
    """
    A_lo, A_up = A, A
    b_lo, b_up = bias, bias
    for i in range(depth - 1, -1, -1):
        us, ui, ls, li = (r[:, None, :] for r in relaxations[i])
        pos, neg = np.maximum(A_lo, 0.0), np.minimum(A_lo, 0.0)
        b_lo = b_lo + (pos * li + neg * ui).sum(axis=-1)
        A_lo = pos * ls + neg * us
        pos, neg = np.maximum(A_up, 0.0), np.minimum(A_up, 0.0)
        b_up = b_up + (pos * ui + neg * li).sum(axis=-1)
        A_up = pos * us + neg * ls
        w, b = layers[i].weight, layers[i].bias
        b_lo = b_lo + A_lo @ b
        b_up = b_up + A_up @ b
        A_lo = A_lo @ w
        A_up = A_up @ w
    return A_lo, b_lo, A_up, b_up


def _as_batch(x0, dim):
    x = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim or x.ndim != 2:
        raise InvalidInput(f"anchor shape {np.shape(x0)} does not match input_dim {dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("non-finite anchor")
    return x, single


def _concretize(A_lo, c, A_up, d, spec):
    q = spec.dual_q
    return c - spec.epsilon * dual_norm(A_lo, q), d + spec.epsilon * dual_norm(A_up, q)


def _hidden_bounds(net, X, spec):
    """Pre-activation intervals and relaxations of every hidden layer."""
    layers = net.layers
    B = X.shape[0]
    bounds, relaxations = [], []
    for i in range(len(layers) - 1):
        w, b = layers[i].weight, layers[i].bias
        A = np.broadcast_to(w, (B,) + w.shape)
        bias = np.broadcast_to(b, (B, b.shape[0]))
        A_lo, b_lo, A_up, b_up = _backward(layers, relaxations, i, A, bias)
        c = np.einsum("bkd,bd->bk", A_lo, X) + b_lo
        d = np.einsum("bkd,bd->bk", A_up, X) + b_up
        lo, up = _concretize(A_lo, c, A_up, d, spec)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
            raise NumericalFailure(f"non-finite pre-activation bounds at layer {i}")
        bounds.append((lo, up))
        relaxations.append(_relax(lo, up))
    return bounds, relaxations


def preactivation_bounds(net, x0, spec):
    """``[(l, u), ...]`` for every hidden layer's pre-activation over the ball."""
    X, single = _as_batch(x0, net.input_dim)
    bounds, _ = _hidden_bounds(net, X, spec)
    if single:
        return [(lo[0], up[0]) for lo, up in bounds]
    return bounds


def _output_bounds(net, X, spec, last_weight, last_bias):
    """Bounds for ``last_weight @ h_{H-1} + last_bias`` (batched weights)."""
    _, relaxations = _hidden_bounds(net, X, spec)
    depth = len(net.layers) - 1
    A_lo, b_lo, A_up, b_up = _backward(net.layers, relaxations, depth, last_weight, last_bias)
    c = np.einsum("bkd,bd->bk", A_lo, X) + b_lo
    d = np.einsum("bkd,bd->bk", A_up, X) + b_up
    for arr in (A_lo, A_up, c, d):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure("non-finite linear bounds")
    return A_lo, c, A_up, d


@dataclass(frozen=True)
class LinearBounds:
    """``L dx + c <= f(x0 + dx) <= U dx + d_off`` for all ``dx`` in the ball."""

    lower_matrix: np.ndarray
    upper_matrix: np.ndarray
    lower_offset: np.ndarray
    upper_offset: np.ndarray
    anchor: np.ndarray
    spec: PerturbationSpec


def linear_outer_bounds(net, x0, spec):
    X, single = _as_batch(x0, net.input_dim)
    last = net.layers[-1]
    B = X.shape[0]
    W = np.broadcast_to(last.weight, (B,) + last.weight.shape)
    b = np.broadcast_to(last.bias, (B, last.bias.shape[0]))
    L, c, U, d = _output_bounds(net, X, spec, W, b)
    if single:
        return LinearBounds(L[0], U[0], c[0], d[0], X[0], spec)
    return [LinearBounds(L[k], U[k], c[k], d[k], X[k], spec) for k in range(B)]


@dataclass(frozen=True)
class MarginCoefficients:
    """Per-example certified margin coefficients.

    Row ``j`` of ``L_hat`` and entry ``j`` of ``c_hat`` bound the logit gap
    between ``true_class`` and class ``target_index_map(j, true_class)``.
    """

    L_hat: np.ndarray
    c_hat: np.ndarray
    true_class: int
    model_id: str | None = None
    example_id: int | None = None
    normalized: bool = False
    Z: float | None = None


@dataclass(frozen=True)
class CoefficientSet:
    """Margin coefficients of one model over a whole dataset.

    ``L_hat`` has shape ``(N, C-1, d)`` and ``c_hat`` shape ``(N, C-1)``.
    """

    L_hat: np.ndarray
    c_hat: np.ndarray
    labels: np.ndarray
    spec: PerturbationSpec
    model_id: str = ""
    normalized: bool = False
    Z: float | None = None

    @property
    def shape(self):
        n, k, d = self.L_hat.shape
        return n, k + 1, d

    def __len__(self):
        return self.L_hat.shape[0]

    def __getitem__(self, k):
        return MarginCoefficients(self.L_hat[k], self.c_hat[k], int(self.labels[k]),
                                  self.model_id, k, self.normalized, self.Z)

    def margins(self):
        return self.c_hat - self.spec.epsilon * dual_norm(self.L_hat, self.spec.dual_q)


def model_fingerprint(net):
    """Hex sha256 of the model's canonical text form."""
    text = json.dumps(network_to_dict(net), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _margin_last_layer(net, labels):
    last = net.layers[-1]
    C = net.num_classes
    others = np.array([[target_index_map(j, int(y)) for j in range(C - 1)] for y in labels],
                      dtype=np.int64).reshape(len(labels), C - 1)
    W = last.weight[labels][:, None, :] - last.weight[others]
    b = last.bias[labels][:, None] - last.bias[others]
    return W, b


def margin_coefficient_set(net, X, labels, spec, model_id=None):
    """Raw margin coefficients of ``net`` for every row of ``X``."""
    X, _ = _as_batch(X, net.input_dim)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (X.shape[0],):
        raise InvalidInput("one label per anchor required")
    if net.num_classes < 2 or labels.min() < 0 or labels.max() >= net.num_classes:
        raise InvalidInput("labels out of range for the model")
    W, b = _margin_last_layer(net, labels)
    L, c, _, _ = _output_bounds(net, X, spec, W, b)
    labels = labels.copy()
    return CoefficientSet(L, c, labels, spec,
                          model_fingerprint(net) if model_id is None else model_id)


def margin_coefficients(net, x0, true_class, spec):
    x = np.asarray(x0, dtype=np.float64)
    cs = margin_coefficient_set(net, x[None, :], [true_class], spec)
    return cs[0]


def margin_lower_bound(coeffs, spec):
    """``M_j = -eps * ||L_hat_j||_q + c_hat_j``."""
    L = np.asarray(coeffs.L_hat)
    c = np.asarray(coeffs.c_hat)
    if L.shape[:-1] != c.shape:
        raise InvalidInput(f"L_hat {L.shape} and c_hat {c.shape} disagree")
    return c - spec.epsilon * dual_norm(L, spec.dual_q)


def compute_normalizer(coeffs):
    """Mean of all ``c_hat`` entries of one model, example-major order."""
    if isinstance(coeffs, CoefficientSet):
        values = coeffs.c_hat.ravel()
    else:
        coeffs = list(coeffs)
        if not coeffs:
            raise InvalidInput("no coefficients given")
        values = np.concatenate([np.ravel(c.c_hat) for c in coeffs])
    if values.size == 0:
        raise InvalidInput("no coefficients given")
    z = math.fsum(values.tolist()) / values.size
    if not z > Z_MIN:
        raise NormalizerDegenerate(f"normalizer {z:.6g} <= {Z_MIN}")
    return z


def normalize_coefficients(raw, Z):
    if not Z > 0:
        raise NormalizerDegenerate(f"normalizer must be positive, got {Z}")
    if isinstance(raw, CoefficientSet):
        return CoefficientSet(raw.L_hat / Z, raw.c_hat / Z, raw.labels, raw.spec,
                              raw.model_id, True, float(Z))
    return MarginCoefficients(np.asarray(raw.L_hat) / Z, np.asarray(raw.c_hat) / Z,
                              raw.true_class, raw.model_id, raw.example_id, True, float(Z))


def normalized_set(raw):
    """Normalize a raw coefficient set with its own mean-offset normalizer."""
    return normalize_coefficients(raw, compute_normalizer(raw))


# -- binary cache -------------------------------------------------------------
#
# magic "RBBC1" | model sha256 (32 bytes) | eps f64 | p code u32 (0 = inf)
# | N, C, d u32 | normalized u8 | Z f64
# then per example: true_class u32 (1-based), L_hat (C-1)*d f64, c_hat (C-1) f64.
# Little-endian throughout.

_CACHE_MAGIC = b"RBBC1"
_CACHE_HEADER = struct.Struct("<5s32sdIIIIBd")


def write_bounds_cache(cs, path):
    n, C, d = cs.shape
    header = _CACHE_HEADER.pack(_CACHE_MAGIC, bytes.fromhex(cs.model_id or "0" * 64),
                                cs.spec.epsilon, _P_CODES[cs.spec.p], n, C, d,
                                int(cs.normalized), float(cs.Z or 0.0))
    with open(path, "wb") as fh:
        fh.write(header)
        for k in range(n):
            fh.write(struct.pack("<I", int(cs.labels[k]) + 1))
            fh.write(np.ascontiguousarray(cs.L_hat[k], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(cs.c_hat[k], dtype="<f8").tobytes())


def read_bounds_cache(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CACHE_HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, mid, eps, pcode, n, C, d, normed, Z = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if pcode not in _P_FROM_CODE:
        raise CacheFormatError(f"{path}: unknown norm code {pcode}")
    rec = np.dtype([("y", "<u4"), ("L", "<f8", ((C - 1) * d,)), ("c", "<f8", (C - 1,))])
    body = raw[_CACHE_HEADER.size:]
    if len(body) != n * rec.itemsize:
        raise CacheFormatError(f"{path}: payload size mismatch")
    recs = np.frombuffer(body, dtype=rec, count=n)
    L = recs["L"].astype(np.float64).reshape(n, C - 1, d)
    c = recs["c"].astype(np.float64).reshape(n, C - 1)
    labels = recs["y"].astype(np.int64) - 1
    spec = PerturbationSpec(_P_FROM_CODE[pcode], eps)
    return CoefficientSet(L, c, labels, spec, mid.hex(), bool(normed), Z if normed else None)
