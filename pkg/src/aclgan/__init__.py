"""Unpaired image-to-image translation with an adversarial-consistency loss."""

from .core import PRESETS, ConfigError, Hyperparameters, load_config, validate_hparams

__all__ = ["PRESETS", "ConfigError", "Hyperparameters", "load_config", "validate_hparams"]
__version__ = "0.1.0"
