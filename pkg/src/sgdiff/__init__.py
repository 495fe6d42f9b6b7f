"""Scene-graph conditioned latent diffusion with masked contrastive graph pretraining."""

from sgdiff.errors import ConfigError, DataValidationError, DependencyError, NumericError, SGDiffError
from sgdiff.scenegraph import GroundedScene, SceneGraph, Vocab

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataValidationError",
    "DependencyError",
    "GroundedScene",
    "NumericError",
    "SGDiffError",
    "SceneGraph",
    "Vocab",
]
