"""Exception hierarchy shared across the package."""


class TierError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TierError, ValueError):
    pass


class DegenerateVectorError(TierError, ValueError):
    """A vector too close to zero was asked to be normalized."""


class DomainError(TierError, ValueError):
    pass


class ContractError(TierError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(TierError, FloatingPointError):
    """A NaN or Inf appeared in a forward computation.

    ``tensor_name`` names the first offending tensor (an op name or a
    parameter name).
    """

    def __init__(self, tensor_name: str, message: str | None = None):
        self.tensor_name = tensor_name
        super().__init__(message or f"non-finite values in tensor {tensor_name!r}")


class ConfigError(TierError, ValueError):
    pass


class IntegrityError(TierError):
    """A container file failed validation.

    ``record_index`` is set when the failure is attributable to one record.
    """

    def __init__(self, message: str, record_index: int | None = None):
        self.record_index = record_index
        super().__init__(message)


class VersionError(IntegrityError):
    pass


class UndefinedAUCError(TierError, ValueError):
    """AUC requested on labels containing a single class."""


class DegenerateQueryError(TierError, ValueError):
    pass
