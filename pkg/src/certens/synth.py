"""Seeded Gaussian-blob classification data."""

import numpy as np

from .errors import ConfigError
from .network import LabeledDataset


def make_blobs(classes=3, dims=2, points_per_class=100, spread=0.3, seed=0, center_scale=1.0):
    """``classes`` isotropic Gaussian clusters with centres drawn in
    ``[-center_scale, center_scale]^dims``; rows are grouped by class."""
    if classes < 2 or dims < 1 or points_per_class < 1:
        raise ConfigError("need classes >= 2, dims >= 1, points_per_class >= 1")
    if not spread >= 0 or not center_scale > 0:
        raise ConfigError("spread must be >= 0 and center_scale > 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_scale, center_scale, size=(classes, dims))
    x = np.concatenate([
        c + spread * rng.standard_normal((points_per_class, dims)) for c in centers
    ])
    y = np.repeat(np.arange(classes), points_per_class)
    return LabeledDataset(x, y, classes)


def split(dataset, test_fraction=0.3, seed=0):
    """Seeded random train/test split."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(idx[n_test:])), dataset.subset(np.sort(idx[:n_test]))


def random_feature_mask(dims, fraction=0.8, seed=0):
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * dims)))
    return tuple(sorted(rng.choice(dims, size=k, replace=False).tolist()))
