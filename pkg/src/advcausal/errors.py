"""Exception hierarchy shared by every module."""


class AdvCausalError(Exception):
    pass


class ContractError(AdvCausalError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    pass


class NumericalError(ContractError):
    """A NaN or Inf appeared in a forward or backward value."""


class DegenerateDenominatorError(ContractError):
    pass


class FormatError(AdvCausalError, ValueError):
    """Malformed input file. Carries the byte offset or row number when known."""

    def __init__(self, message, *, offset=None, row=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.row = row


class ConfigError(AdvCausalError, ValueError):
    pass
