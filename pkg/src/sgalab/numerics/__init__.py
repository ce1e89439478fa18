"""Numerical substrate: seeded RNG, Jacobi linear algebra, layers, optimizer."""

from .layers import (
    AdaptiveAvgPool,
    Conv2d,
    FlattenToPatches,
    GroupNorm,
    Layer,
    Linear,
    ReLU,
    Sequential,
    SiLU,
    UpsampleNearest,
    adaptive_avg_pool,
    layer_backward,
    layer_forward,
)
from .linalg import (
    complete_basis,
    finite_diff_grad,
    matmul,
    pca_project,
    relative_error,
    svd,
    sym_eig,
)
from .optim import AdamW
from .rng import RngState

__all__ = [
    "AdamW", "AdaptiveAvgPool", "Conv2d", "FlattenToPatches", "GroupNorm", "Layer",
    "Linear", "ReLU", "RngState", "Sequential", "SiLU", "UpsampleNearest",
    "adaptive_avg_pool", "complete_basis", "finite_diff_grad", "layer_backward",
    "layer_forward", "matmul", "pca_project", "relative_error", "svd", "sym_eig",
]
