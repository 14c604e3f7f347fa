"""Exception types; each maps to a CLI exit code."""


class EcgraError(Exception):
    exit_code = 1


class UsageError(EcgraError):
    exit_code = 1


class DataError(EcgraError, ValueError):
    exit_code = 2


class NumericalError(EcgraError, ArithmeticError):
    exit_code = 3


class CheckpointError(DataError):
    pass


class DependencyError(UsageError):
    """A pipeline needs checkpoints from another pipeline that are not available."""
