"""Exception hierarchy shared by all modules."""


class IndimartError(ValueError):
    """Base class for every error raised by the package."""


class DomainError(IndimartError):
    """Object defined on the wrong space, empty block, dimension mismatch."""


class InvariantError(IndimartError):
    """Construction would violate a type invariant (weights, partitions, ...)."""


class MeasurabilityError(IndimartError):
    """A process value is not constant on the blocks it must be constant on."""


class PreconditionError(IndimartError):
    """Input is not a martingale, or a conditional mean is not zero."""


class DegenerateStageError(IndimartError):
    """A stage produced eta == 0 while the residual is nonzero."""


class SchemaError(IndimartError):
    """Input file does not follow the documented JSON layout."""
