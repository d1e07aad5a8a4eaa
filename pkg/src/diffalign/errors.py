"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range or inconsistent."""


class ShapeError(ValueError):
    """Tensor or image dimensions violate an operation's contract."""


class RenderError(RuntimeError):
    """Scene rendering failed (e.g. camera viewport escapes the background)."""


class DataError(IOError):
    """A dataset file is missing or corrupt; message names the sample id."""


class TrainingError(RuntimeError):
    """Training aborted (NaN loss, unmet gate after max epochs, ...)."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. empty valid mask)."""


class SamplingError(RuntimeError):
    """Inference produced a non-finite latent mid-trajectory."""
