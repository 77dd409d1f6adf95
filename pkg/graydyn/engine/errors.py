class GrayBoxError(Exception):
    """ Base class of all errors raised by graydyn """


class InputShapeError(GrayBoxError, ValueError):
    """ Tensor dimensions do not match what an operation expects """


class NumericError(GrayBoxError, ArithmeticError):
    """ Non-finite value encountered """


class SolverError(NumericError):
    """ Linear solve failed, e.g. mass matrix lost positive definiteness """


class FormatError(GrayBoxError, ValueError):
    """ File has wrong magic, version or is truncated """


class ConfigError(GrayBoxError, ValueError):
    """ Invalid configuration, model spec or physical parameters """


class PolicyError(GrayBoxError, IndexError):
    """ Time index outside the horizon of a policy """
