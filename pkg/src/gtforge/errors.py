"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the process exit
status the command line maps it to: 2 for usage/configuration problems,
3 for data problems, 4 for numerical failures.
"""


class GtForgeError(Exception):
    code = "error"
    exit_status = 1


class ConfigError(GtForgeError, ValueError):
    code = "config"
    exit_status = 2


class DataError(GtForgeError, ValueError):
    code = "data"
    exit_status = 3


class NoDataError(DataError):
    code = "no_data"


class InsufficientDataError(DataError):
    code = "insufficient_data"


class NoOverlapError(DataError):
    code = "no_overlap"


class NoAssociationError(DataError):
    code = "no_association"


class MissingInputError(DataError):
    code = "missing_input"


class ZeroSegmentsError(DataError):
    code = "zero_segments"


class NumericalError(GtForgeError, ArithmeticError):
    code = "numerical"
    exit_status = 4


class SingularSystemError(NumericalError):
    code = "singular_system"


class DegenerateAlignmentError(NumericalError):
    code = "degenerate_alignment"


class LocalizationLostError(NumericalError):
    code = "localization_lost"


class SpawnError(ConfigError):
    code = "spawn_failed"
