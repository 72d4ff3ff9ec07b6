"""Exception hierarchy shared across the package.

ValidationError means the caller handed us something malformed (bad file,
bad graph, bad config); NumericalError means a computation went off the
rails at runtime. The CLI maps these to exit codes 1 and 2.
"""


class OmtlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OmtlError):
    """Malformed input: files, graphs, records, configs."""


class NumericalError(OmtlError):
    """Non-finite values or other numerical failures during computation."""


class ShapeMismatch(OmtlError):
    """Operand shapes do not conform for a tensor primitive."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = tuple(shapes)
        pretty = " vs ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {pretty}")
