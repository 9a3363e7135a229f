"""Exception hierarchy shared by every stage of the simulator."""


class FedAdaptError(Exception):
    """Base class for all errors raised by fedadapt."""


class ConfigurationError(FedAdaptError, ValueError):
    """Invalid configuration, shape mismatch or out-of-range setting."""


class DataError(FedAdaptError, ValueError):
    """Dataset content violates a precondition (labels, sample counts)."""


class FormatError(DataError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(FedAdaptError, ValueError):
    """An argument breaks a documented contract, e.g. a non-ReLU map."""


class ComparisonError(FedAdaptError, ValueError):
    """Two representations were extracted with different channel selectors."""


class InternalError(FedAdaptError, RuntimeError):
    """Inconsistent internal arrays (length mismatches between buffers)."""


class StageError(FedAdaptError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
