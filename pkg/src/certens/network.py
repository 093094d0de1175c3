"""Feedforward ReLU classifiers: representation, inference and a plain trainer.

Class indices are 0-based throughout the Python API; the text file formats
store labels 1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidIndex, InvalidInput, InvalidModel, InvalidScale, TrainingDiverged, Unsupported,
)

ACTIVATIONS = ("relu", "identity")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = _frozen(self.weight)
        b = _frozen(self.bias)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise InvalidModel(f"bad layer shapes weight={w.shape} bias={b.shape}")
        if self.activation not in ACTIVATIONS:
            raise InvalidModel(f"unsupported activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidModel("non-finite layer parameters")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class Network:
    """Layered affine+ReLU classifier ending in an identity (logit) layer.

    ``feature_mask`` lists the input columns the model was trained on; the
    first-layer weights of all other columns are zero, so the network still
    consumes the full ``input_dim`` features.
    """

    layers: tuple
    feature_mask: tuple | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidModel("network has no layers")
        for prev, cur in zip(layers, layers[1:]):
            if cur.n_in != prev.n_out:
                raise InvalidModel(
                    f"layer shapes do not chain: {prev.weight.shape} -> {cur.weight.shape}"
                )
        if any(layer.activation != "relu" for layer in layers[:-1]):
            raise Unsupported("hidden layers must use relu")
        if layers[-1].activation != "identity":
            raise InvalidModel("last layer must use identity activation")
        object.__setattr__(self, "layers", layers)
        if self.feature_mask is not None:
            mask = tuple(sorted(int(i) for i in self.feature_mask))
            if any(i < 0 or i >= layers[0].n_in for i in mask) or len(set(mask)) != len(mask):
                raise InvalidModel(f"feature mask out of range: {mask}")
            object.__setattr__(self, "feature_mask", mask)

    @property
    def input_dim(self):
        return self.layers[0].n_in

    @property
    def num_classes(self):
        return self.layers[-1].n_out

    @property
    def num_parameters(self):
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self):
        """Flat copy of all parameters, layer by layer, weight before bias."""
        return np.concatenate([np.r_[l.weight.ravel(), l.bias] for l in self.layers])

    def with_parameters(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_parameters,):
            raise InvalidModel(f"expected {self.num_parameters} parameters, got {theta.shape}")
        layers, pos = [], 0
        for layer in self.layers:
            nw, nb = layer.weight.size, layer.bias.size
            w = theta[pos:pos + nw].reshape(layer.weight.shape)
            b = theta[pos + nw:pos + nw + nb]
            pos += nw + nb
            layers.append(Layer(w, b, layer.activation))
        return Network(tuple(layers), self.feature_mask)


@dataclass(frozen=True)
class LabeledDataset:
    examples: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None
    feature_mask: tuple | None = field(default=None)

    def __post_init__(self):
        x = _frozen(self.examples)
        y = np.array(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidInput(f"examples must be a non-empty N x d array, got {x.shape}")
        if y.shape != (x.shape[0],) or not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidInput("labels must be N integers")
        y = y.astype(np.int64)
        y.setflags(write=False)
        c = int(y.max()) + 1 if self.num_classes is None else int(self.num_classes)
        if y.min() < 0 or y.max() >= c:
            raise InvalidInput(f"labels outside [0, {c})")
        if not np.all(np.isfinite(x)):
            raise InvalidInput("non-finite examples")
        object.__setattr__(self, "examples", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", c)
        if self.feature_mask is not None:
            mask = tuple(sorted(int(i) for i in self.feature_mask))
            if any(i < 0 or i >= x.shape[1] for i in mask):
                raise InvalidInput(f"feature mask out of range: {mask}")
            object.__setattr__(self, "feature_mask", mask)

    def __len__(self):
        return self.examples.shape[0]

    @property
    def dim(self):
        return self.examples.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.examples[idx], self.labels[idx], self.num_classes,
                              self.feature_mask)


def forward(net, x):
    """Logits of ``net`` at ``x`` (shape ``(d,)`` or ``(N, d)``)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.input_dim or h.ndim not in (1, 2):
        raise InvalidModel(f"input shape {h.shape} does not match input_dim {net.input_dim}")
    for layer in net.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def target_index_map(j, i, num_classes=None):
    """Class index of the ``j``-th target when the true class ``i`` is skipped."""
    if num_classes is not None:
        if not 0 <= i < num_classes or not 0 <= j < num_classes - 1:
            raise InvalidIndex(f"(j={j}, i={i}) out of range for {num_classes} classes")
    elif j < 0 or i < 0:
        raise InvalidIndex(f"negative index (j={j}, i={i})")
    return j if j < i else j + 1


def margin_difference_matrix(true_class, num_classes):
    """(C-1) x C matrix whose row j is ``e_i - e_{s(j,i)}``."""
    if num_classes < 2:
        raise InvalidModel("margin needs at least two classes")
    if not 0 <= true_class < num_classes:
        raise InvalidIndex(f"true class {true_class} out of range")
    m = np.zeros((num_classes - 1, num_classes))
    m[:, true_class] = 1.0
    for j in range(num_classes - 1):
        m[j, target_index_map(j, true_class)] = -1.0
    return m


def margin_network(net, true_class):
    """Same network with the last layer replaced by pairwise logit differences."""
    if net.num_classes < 2:
        raise InvalidModel("margin needs at least two classes")
    if not 0 <= true_class < net.num_classes:
        raise InvalidIndex(f"true class {true_class} out of range")
    last = net.layers[-1]
    # rows in s(j, i) order: np.delete keeps the remaining classes ascending
    w = last.weight[true_class] - np.delete(last.weight, true_class, axis=0)
    b = last.bias[true_class] - np.delete(last.bias, true_class)
    return Network(net.layers[:-1] + (Layer(w, b, "identity"),), net.feature_mask)


def scale_network(net, k):
    if not k > 0:
        raise InvalidScale(f"scale must be positive, got {k}")
    last = net.layers[-1]
    return Network(net.layers[:-1] + (Layer(k * last.weight, k * last.bias, "identity"),),
                   net.feature_mask)


def backprop(net, x, grad_logits):
    """Reverse-mode gradients of ``sum(grad_logits * forward(net, x))``.

    Returns ``(layer_grads, grad_x)`` where ``layer_grads`` is a list of
    ``(dW, db)`` pairs aligned with ``net.layers``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts, pre = [x], []
    h = x
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    g = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    grads = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.activation == "relu":
            g = g * (pre[idx] > 0)
        grads[idx] = (g.T @ acts[idx], g.sum(axis=0))
        g = g @ layer.weight
    return grads, g


def flatten_grads(grads):
    return np.concatenate([np.r_[dw.ravel(), db] for dw, db in grads])


def init_network(input_dim, hidden, num_classes, rng, feature_mask=None, zero_output=False):
    """He-initialised MLP; masked-out input columns start (and stay) at zero."""
    sizes = [input_dim, *hidden, num_classes]
    layers = []
    for idx, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        last = idx == len(sizes) - 2
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        if idx == 0 and feature_mask is not None:
            keep = np.zeros(n_in, dtype=bool)
            keep[list(feature_mask)] = True
            w[:, ~keep] = 0.0
        if last and zero_output:
            w = np.zeros_like(w)
        layers.append(Layer(w, np.zeros(n_out), "identity" if last else "relu"))
    return Network(tuple(layers), feature_mask)


def _masked_inputs(x, feature_mask):
    if feature_mask is None:
        return x
    xm = np.zeros_like(x)
    cols = list(feature_mask)
    xm[:, cols] = x[:, cols]
    return xm


def train_baseline(dataset, hidden=(16,), seed=0, epochs=200, step_size=0.1):
    """Full-batch gradient descent on mean softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    net = init_network(dataset.dim, hidden, dataset.num_classes, rng, dataset.feature_mask)
    x = _masked_inputs(dataset.examples, dataset.feature_mask)
    onehot = np.eye(dataset.num_classes)[dataset.labels]
    n = len(dataset)
    theta = net.parameters()
    for _ in range(epochs):
        logits = forward(net, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        grads, _ = backprop(net, x, (np.exp(logp) - onehot) / n)
        theta = theta - step_size * flatten_grads(grads)
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged("non-finite parameters")
        net = net.with_parameters(theta)
    return net


# -- text serialization -----------------------------------------------------

def network_to_dict(net):
    out = {
        "layers": [
            {"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
            for l in net.layers
        ],
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
    }
    if net.feature_mask is not None:
        out["feature_mask"] = list(net.feature_mask)
    return out


def network_from_dict(d):
    try:
        layers = tuple(
            Layer(np.array(l["weight"], dtype=np.float64).reshape(len(l["bias"]), -1),
                  l["bias"], l["activation"])
            for l in d["layers"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidModel(f"malformed model: {exc}") from exc
    net = Network(layers, d.get("feature_mask"))
    if net.input_dim != d.get("input_dim", net.input_dim) or \
            net.num_classes != d.get("num_classes", net.num_classes):
        raise InvalidModel("declared input_dim/num_classes do not match layers")
    return net


def save_network(net, path):
    Path(path).write_text(json.dumps(network_to_dict(net)) + "\n")


def load_network(path):
    return network_from_dict(json.loads(Path(path).read_text()))


def dataset_to_dict(ds):
    out = {
        "examples": ds.examples.tolist(),
        "labels": (ds.labels + 1).tolist(),
        "num_classes": ds.num_classes,
    }
    if ds.feature_mask is not None:
        out["feature_mask"] = list(ds.feature_mask)
    return out


def dataset_from_dict(d):
    labels = np.asarray(d["labels"])
    if labels.size and labels.min() < 1:
        raise InvalidInput("dataset file labels are 1-based")
    return LabeledDataset(np.asarray(d["examples"], dtype=np.float64), labels - 1,
                          d.get("num_classes"), d.get("feature_mask"))


def save_dataset(ds, path):
    Path(path).write_text(json.dumps(dataset_to_dict(ds)) + "\n")


def load_dataset(path):
    return dataset_from_dict(json.loads(Path(path).read_text()))
