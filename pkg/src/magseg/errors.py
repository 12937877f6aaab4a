"""Exception hierarchy shared by every module of the package."""


class MagsegError(Exception):
    """Base class for all package errors."""


class ShapeError(MagsegError, ValueError):
    pass


class DomainError(MagsegError, ValueError):
    pass


class StateError(MagsegError, RuntimeError):
    pass


class FormatError(MagsegError, ValueError):
    """File does not follow the binary tensor layout."""


class DataError(MagsegError, ValueError):
    """File is well-formed but its values are unusable."""


class GenError(MagsegError, ValueError):
    pass


class TrainError(MagsegError, RuntimeError):
    pass


class EvalError(MagsegError, RuntimeError):
    pass


class ConfigError(MagsegError, ValueError):
    pass


class UsageError(MagsegError, ValueError):
    pass
