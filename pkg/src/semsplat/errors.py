"""Exception types shared across the package."""


class SemsplatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SemsplatError, ValueError):
    """Malformed or out-of-contract arguments (shape/dimension/NaN)."""


class BehindCameraError(SemsplatError, ValueError):
    """Gaussian center is behind the near clip plane."""


class EmptySceneError(SemsplatError, ValueError):
    """Operation requires a nonempty Gaussian field."""


class InvalidStateError(SemsplatError, RuntimeError):
    """Object is in a state that cannot serve the request (e.g. empty codebook)."""


class CorruptAnnotationError(SemsplatError, ValueError):
    """Region annotation references a region id outside its feature table."""


class SceneGenerationError(SemsplatError, RuntimeError):
    """Scene recipe could not be realized (e.g. infeasible feature separation)."""


class ConfigError(SemsplatError, ValueError):
    """Bad run configuration (CLI exit code 2)."""


class DataError(SemsplatError, ValueError):
    """Bad or missing run data on disk (CLI exit code 3)."""
