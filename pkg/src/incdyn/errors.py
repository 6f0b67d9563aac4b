"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (bad shape, range, or state)."""


class NoDataError(RuntimeError):
    """An operation that needs data was given an empty buffer or batch."""


class DivergedError(RuntimeError):
    """Training or model evaluation produced non-finite values."""


class StabilizationError(RuntimeError):
    """The Riccati iteration failed to converge (non-stabilizable pair)."""
