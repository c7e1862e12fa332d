"""Entropy-guided channel pruning for convolutional networks."""

__version__ = "0.1.0"

from .config import SparsifyConfig
from .dumps import ConvGeometry, LayerDump, load_dump, save_dump
from .engine import EvalDataset, capture_dumps, evaluate, forward
from .errors import (
    DataError,
    PruneError,
    SingularSystemError,
    SolverViolationError,
    StructuralError,
    ValidationError,
)
from .lift import (
    RegressionDataset,
    apply_channel_weights,
    devectorize_kernels,
    extract_patches,
    vectorize_kernels,
)
from .measures import entropy, sparsity
from .network import NetworkSpec, flops, load_network, param_count, save_network, validate_network
from .pipeline import (
    LayerPruneResult,
    PruneReport,
    merge_residual_w,
    prune_network,
    report,
    sample_positions,
    sparsify_layer,
    sparsify_net,
)
from .solver import (
    SolveResult,
    build_w_quadratic,
    evaluate_loss,
    lambda_step,
    project_simplex,
    solve,
    w_step,
)

__all__ = [
    "SparsifyConfig",
    "ConvGeometry",
    "LayerDump",
    "load_dump",
    "save_dump",
    "EvalDataset",
    "capture_dumps",
    "evaluate",
    "forward",
    "PruneError",
    "DataError",
    "ValidationError",
    "StructuralError",
    "SingularSystemError",
    "SolverViolationError",
    "RegressionDataset",
    "extract_patches",
    "vectorize_kernels",
    "devectorize_kernels",
    "apply_channel_weights",
    "entropy",
    "sparsity",
    "NetworkSpec",
    "param_count",
    "flops",
    "validate_network",
    "save_network",
    "load_network",
    "LayerPruneResult",
    "PruneReport",
    "sample_positions",
    "sparsify_layer",
    "merge_residual_w",
    "prune_network",
    "report",
    "sparsify_net",
    "SolveResult",
    "evaluate_loss",
    "lambda_step",
    "build_w_quadratic",
    "w_step",
    "project_simplex",
    "solve",
]
