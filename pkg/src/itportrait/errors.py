"""Exception types raised across the package."""


class ITPortraitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ITPortraitError, ValueError):
    """Shapes of latents, images or embeddings do not agree."""


class LayerRangeError(ITPortraitError, ValueError):
    """A layer range falls outside the target latent."""


class ConfigurationError(ITPortraitError, ValueError):
    """A configuration value is missing, unknown or out of its admissible set."""


class VocabularyError(ITPortraitError, KeyError):
    """A text token is not part of the toy embedder's vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PoseEstimationError(ITPortraitError, RuntimeError):
    """The pose estimator could not produce a pose for an image."""


class DivergenceError(ITPortraitError, RuntimeError):
    """An optimisation produced a non-finite loss."""

    def __init__(self, message, *, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class DegenerateDirectionError(ITPortraitError, ArithmeticError):
    """An embedding-space direction is too short to define a cosine."""


class IncompatibleCheckpointError(ITPortraitError, RuntimeError):
    """A checkpoint or container file cannot be read by this version."""


class BackendUnavailableError(ITPortraitError, RuntimeError):
    """A requested backend capability is not installed."""
