"""Exception hierarchy. Everything raised on purpose derives from ArgscoreError."""


class ArgscoreError(Exception):
    """Base for all errors this package raises deliberately."""


class ShapeError(ArgscoreError):
    """Tensor arguments have incompatible shapes."""


class ContractError(ArgscoreError):
    """An API precondition was violated by the caller."""


class ValidationError(ArgscoreError):
    """Input data failed validation."""


class ParseError(ArgscoreError):
    """A file could not be parsed."""


class CheckpointError(ArgscoreError):
    """A checkpoint file is malformed or inconsistent."""
