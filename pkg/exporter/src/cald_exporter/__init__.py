"""Boundary adapter between torch classifiers and the CALD format.

Runs a pretrained image classifier over a labeled image folder, captures
the pooled penultimate activations and logits at the final linear layer,
and writes them with the ground-truth labels as a CALD file for the
calibration toolkit. Strictly an exporter: it computes no calibration
metrics and trains nothing. ``cald-export --help`` describes the
command-line surface.
"""

from .errors import (DatasetResolutionError, ExporterError, FeatureHookError,
                     ModelResolutionError)
from .jobs import ExportJob, ExportSummary, export

__version__ = "0.1.0"

__all__ = [
    "DatasetResolutionError",
    "ExportJob",
    "ExportSummary",
    "ExporterError",
    "FeatureHookError",
    "ModelResolutionError",
    "__version__",
    "export",
]
