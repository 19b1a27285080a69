"""Exception types shared across the package.

The CLI maps these onto exit codes: model/file problems are I/O errors
(exit 2), everything below EngineError is an engine error (exit 3).
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EngineError):
    """Operand shapes are inconsistent with the requested operation."""


class DomainError(EngineError):
    """An argument is outside the operation's domain (e.g. empty tensor)."""


class NumericError(EngineError):
    """A non-finite value appeared during forward or backward computation."""

    def __init__(self, message: str, layer: int | str | None = None, rule: str | None = None):
        where = []
        if layer is not None:
            where.append(f"layer={layer}")
        if rule is not None:
            where.append(f"rule={rule}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.layer = layer
        self.rule = rule


class GuardedDenominatorError(NumericError):
    """A data-dependent denominator fell below the configured guard."""


class GraphSizeError(EngineError):
    """Network too large to explode into an explicit edge graph."""


class ModelFormatError(EngineError):
    """Base class for model/image file format problems."""


class VersionMismatchError(ModelFormatError):
    """Manifest declares an unsupported format version."""


class TruncatedBlobError(ModelFormatError):
    """Weight blob shorter than the manifest's declared extents."""


class ManifestShapeError(ModelFormatError):
    """Manifest layer geometry is internally inconsistent."""


class NonFiniteWeightError(ModelFormatError):
    """Weight blob contains NaN or infinity."""


class ImageFormatError(ModelFormatError):
    """Malformed or unsupported PPM/PGM file."""
