"""Exception types shared across the package."""


class EgoPoseError(Exception):
    """Base class for package errors."""


class InvalidInputError(EgoPoseError, ValueError):
    """Malformed or non-finite input."""


class ContractError(EgoPoseError, RuntimeError):
    """An operation was called outside its precondition."""


class ShapeMismatchError(EgoPoseError, ValueError):
    pass


class DatasetError(EgoPoseError, OSError):
    """Missing or corrupt dataset files."""


class CheckpointError(EgoPoseError, ValueError):
    """Incompatible or corrupt checkpoint."""


class NonFiniteError(EgoPoseError, FloatingPointError):
    """A loss or gradient became NaN/inf during training."""
