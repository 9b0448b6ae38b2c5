"""Exception hierarchy shared by all modules."""


class CartsegError(Exception):
    """Base class; the CLI maps these to nonzero exit codes."""


class ConfigError(CartsegError):
    pass


class ParseError(CartsegError):
    pass


class ValidationError(CartsegError):
    pass


class ShapeError(CartsegError):
    pass


class DataError(CartsegError):
    pass


class IoError(CartsegError):
    pass


class DivergenceError(CartsegError):
    pass
