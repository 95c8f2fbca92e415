"""Post-hoc confidence calibration for frozen classifiers.

Two calibrators share one evaluation stack: a constant temperature fitted
by grid search (:mod:`adacal.tempscale`) and a sample-adaptive temperature
predicted from a latent-variable model over feature embeddings
(:mod:`adacal.adats`). Datasets travel in the CALD binary container
(:mod:`adacal.dataset`), metrics live in :mod:`adacal.metrics`, and
:mod:`adacal.analysis` holds closed-form gradients with their
finite-difference verification plus model diagnostics. ``adacal --help``
describes the command-line surface.
"""

from .dataset import (CalibrationDataset, DatasetSplit, SyntheticSpec,
                      generate_synthetic, read_dataset, split_dataset, take,
                      two_cluster_spec, write_dataset)
from .errors import (AdacalError, CaldFormatError, DatasetValidationError,
                     ManifestError, ModelFormatError, TrainingDivergedError)

__version__ = "0.1.0"

__all__ = [
    "AdacalError",
    "CalibrationDataset",
    "CaldFormatError",
    "DatasetSplit",
    "DatasetValidationError",
    "ManifestError",
    "ModelFormatError",
    "SyntheticSpec",
    "TrainingDivergedError",
    "__version__",
    "generate_synthetic",
    "read_dataset",
    "split_dataset",
    "take",
    "two_cluster_spec",
    "write_dataset",
]
