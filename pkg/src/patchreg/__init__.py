"""Patchwise deformable registration with contrastive features and window-attention stitching."""

from .errors import (
    ConfigError,
    DimsNotDivisible,
    HeaderMismatch,
    InvalidSpec,
    MissingGradient,
    NonFiniteLoss,
    NotScalar,
    PatchRegError,
    ShapeMismatch,
    TooFewPatches,
    UnsupportedDtype,
    WrongPatchCount,
)

__all__ = [
    "ConfigError",
    "DimsNotDivisible",
    "HeaderMismatch",
    "InvalidSpec",
    "MissingGradient",
    "NonFiniteLoss",
    "NotScalar",
    "PatchRegError",
    "ShapeMismatch",
    "TooFewPatches",
    "UnsupportedDtype",
    "WrongPatchCount",
]

__version__ = "0.1.0"
