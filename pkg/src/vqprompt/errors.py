"""Exception hierarchy shared across the package."""


class VQPromptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VQPromptError):
    """Array shapes or dimensions are incompatible."""


class ContractError(VQPromptError):
    """A documented precondition of an operation was violated."""


class DataError(VQPromptError):
    """A dataset carries values outside its declared label space."""


class ProtocolError(VQPromptError):
    """The continual-learning protocol was violated (e.g. overlapping tasks)."""


class FormatError(VQPromptError):
    """A binary file is malformed; the message names the byte offset."""
