"""Exception types shared across the package."""


class GraphFusionError(Exception):
    """Base class for all library errors."""


class ShapeError(GraphFusionError, ValueError):
    """Operands have incompatible shapes. The message carries both shapes."""


class DomainError(GraphFusionError, ValueError):
    """An input lies outside the mathematical domain of the operation."""


class ContractError(GraphFusionError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(GraphFusionError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class ParseError(GraphFusionError, ValueError):
    """A serialized file is malformed.

    ``offset`` points at the byte where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(GraphFusionError, ValueError):
    """Deserialized data violates a structural invariant, named in ``invariant``."""

    def __init__(self, message: str, invariant: str):
        super().__init__(f"{message} [invariant: {invariant}]")
        self.invariant = invariant


class EmptyTissueError(GraphFusionError, ValueError):
    """A heatmap has no usable pixels to sample from."""


class ConfigError(GraphFusionError, ValueError):
    """A configuration file or override could not be parsed or applied."""
