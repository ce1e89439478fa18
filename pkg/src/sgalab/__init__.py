"""Gram-matrix alignment of generative features to a frozen patch prior.

Subpackages: ``numerics`` (RNG, Jacobi linear algebra, layers, AdamW) and
``harness`` (config, data, training driver, metrics, CLI).
"""

from .alignment import (
    ProjectionHead,
    gram,
    project,
    repa_loss,
    repa_loss_grad,
    row_l2_normalize,
    sga_loss,
    sga_loss_grad,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateRowError,
    MetricUndefined,
    NumericalError,
    SgaError,
    ShapeError,
    TrainingDivergence,
)
from .flow import Denoiser, DiffusionTrainer, euler_sample, flow_matching_loss
from .prior import FoundationPrior, extract_features, grid_for_resolution
from .theory import run_verification
from .vae import Vae, VaeTrainer, VaeWeights

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateRowError", "Denoiser", "DiffusionTrainer",
    "FoundationPrior", "MetricUndefined", "NumericalError", "ProjectionHead", "SgaError",
    "ShapeError", "TrainingDivergence", "Vae", "VaeTrainer", "VaeWeights", "euler_sample",
    "extract_features", "flow_matching_loss", "gram", "grid_for_resolution", "project",
    "repa_loss", "repa_loss_grad", "row_l2_normalize", "run_verification", "sga_loss",
    "sga_loss_grad",
]
