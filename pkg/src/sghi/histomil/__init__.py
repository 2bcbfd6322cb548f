"""Weakly-supervised biomarker prediction from whole-slide images.

The pipeline runs tessellation and tile filtering, stain normalization,
tile embedding, multiple-instance models with a training harness,
evaluation metrics and attention-based explanations. :mod:`sghi.histomil.cli`
exposes every stage as a ``histomil`` sub-command.
"""

import importlib_metadata

try:
    __version__: str = importlib_metadata.version("sghi-histomil")
except importlib_metadata.PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = ["__version__"]
