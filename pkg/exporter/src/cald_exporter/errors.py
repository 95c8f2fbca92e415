"""Exception types shared across the package."""


class ExporterError(Exception):
    """Base class for all errors raised by this package."""


class ModelResolutionError(ExporterError):
    """Raised when a model name cannot be resolved to a usable network.

    Covers unknown names, unreadable checkpoint files, and checkpoints
    whose contents do not match a registered architecture.
    """


class DatasetResolutionError(ExporterError):
    """Raised when a dataset name or split cannot be resolved.

    The dataset argument must be a directory holding ``<split>/<class>/``
    image subtrees; the message names whichever level is missing.
    """


class FeatureHookError(ExporterError):
    """Raised when the feature/logits split at the final linear layer
    cannot be established.

    Covers models with no linear output layer, forwards where that layer
    fires more or less than once, and captured features that are not a
    pooled 2-d batch.
    """
