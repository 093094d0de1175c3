"""Certified margin bounds and robustness-weighted ensembles for small ReLU classifiers."""

from .bounds import (
    CoefficientSet,
    LinearBounds,
    MarginCoefficients,
    PerturbationSpec,
    compute_normalizer,
    linear_outer_bounds,
    margin_coefficient_set,
    margin_coefficients,
    margin_lower_bound,
    normalize_coefficients,
    preactivation_bounds,
    relu_relaxation,
)
from .network import (
    LabeledDataset,
    Layer,
    Network,
    forward,
    margin_network,
    scale_network,
    target_index_map,
    train_baseline,
)
from .problem import BoostProblem, WeightVector, assemble, eliminate, ensemble_margin, robboost_loss
from .solver import coordinate_descent, one_step_update, one_step_update_reference

__version__ = "0.1.0"
