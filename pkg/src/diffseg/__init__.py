"""Diffusion-pretrained UNet segmentation on numpy.

Subpackages: ``gradcore`` (autodiff), ``data`` (I/O, patches, synthetic tiles),
``pipeline`` (training stages and CLI); modules ``schedule``, ``diffusion``,
``unet`` and ``seglosses``.
"""

from .errors import ConfigError, DataError, DiffSegError, DomainError, ShapeError, UsageError

__version__ = "0.1.0"
__all__ = ["DiffSegError", "ShapeError", "DomainError", "ConfigError", "DataError", "UsageError"]
