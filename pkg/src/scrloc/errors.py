"""Exception types raised across the package."""


class ScrlocError(ValueError):
    """Base class for all data/parameter errors raised by scrloc."""


class InvalidParameterError(ScrlocError):
    pass


class InfeasibleConstraintError(ScrlocError):
    pass


class DegeneratePairError(ScrlocError):
    """A (cos, sin) pair has (near-)zero norm and carries no phase."""


class DimensionMismatchError(ScrlocError):
    pass


class TooFewSamplesError(ScrlocError):
    pass


class CodebookMismatchError(ScrlocError):
    pass


class FormatError(ScrlocError):
    """Malformed binary or JSON payload."""


class DegenerateConfigurationError(ScrlocError):
    pass


class NoConsensusError(ScrlocError):
    pass


class EmptyInputError(ScrlocError):
    pass


class NoValidPixelsError(ScrlocError):
    pass
