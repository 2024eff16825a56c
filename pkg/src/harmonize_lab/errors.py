"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ManifestError(ValueError):
    """Dataset manifest could not be built or resolved."""


class NumericError(RuntimeError):
    """A computed quantity is non-finite or otherwise unusable."""


class EmptyRegionError(RuntimeError):
    """A masked region contains no active pixels at the working scale."""


class DegenerateQueryError(RuntimeError):
    """Patch embeddings cancel out; no meaningful query direction exists."""
