"""Exception hierarchy shared by every module."""


class RmtError(Exception):
    """Base class for all package errors."""


class InputError(RmtError, ValueError):
    """Malformed input: bad file, bad shape, bad configuration."""


class ParseError(InputError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(InputError):
    pass


class DuplicateIdError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class ShapeError(InputError):
    pass


class ConfigError(InputError):
    pass


class TopologyError(InputError):
    pass


class PairingError(InputError):
    def __init__(self, message, orphans=()):
        super().__init__(message)
        self.orphans = list(orphans)


class NumericError(RmtError, ArithmeticError):
    """Non-finite data or a failed decomposition."""


class DegenerateRowError(NumericError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DomainError(NumericError):
    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class AccuracyError(NumericError):
    pass


class CollinearPatternsError(NumericError):
    def __init__(self, message, subset=()):
        super().__init__(message)
        self.subset = list(subset)
