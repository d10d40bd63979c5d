"""Dynamic spatio-temporal sequential ordinal models."""
from .design import (
    ControlEvent,
    ExpandedDesign,
    Habitat,
    ModelSpec,
    Observation,
    Variant,
    build_design,
    gompertz_decompose,
)
from .inference import (
    ConvergenceError,
    FitResult,
    GridConfig,
    Hyperparameters,
    dic,
    fit,
    predict,
    sample_posterior,
)
from .ordinal import Link, OrdinalScale, Partition
from .spacetime import ARParams, KnotSet, MaternParams, PCPrior, PriorKind

__version__ = "0.1.0"

__all__ = [
    "ARParams",
    "ControlEvent",
    "ConvergenceError",
    "ExpandedDesign",
    "FitResult",
    "GridConfig",
    "Habitat",
    "Hyperparameters",
    "KnotSet",
    "Link",
    "MaternParams",
    "ModelSpec",
    "Observation",
    "OrdinalScale",
    "PCPrior",
    "Partition",
    "PriorKind",
    "Variant",
    "build_design",
    "dic",
    "fit",
    "gompertz_decompose",
    "predict",
    "sample_posterior",
]
