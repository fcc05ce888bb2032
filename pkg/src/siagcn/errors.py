"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
1 for usage/configuration problems, 2 for data problems, 3 for numerical
failures.
"""


class SiaGcnError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(SiaGcnError, ValueError):
    code = "config"


class ShapeError(SiaGcnError, ValueError):
    exit_code = 2
    code = "shape"


class PreconditionError(SiaGcnError, ValueError):
    code = "precondition"


class ContractError(SiaGcnError, RuntimeError):
    code = "contract"


class DataError(SiaGcnError):
    exit_code = 2
    code = "data"


class MissingFileError(DataError, FileNotFoundError):
    code = "missing_file"


class HeaderError(DataError):
    code = "bad_header"


class ParseError(DataError):
    code = "parse"


class NumericalError(SiaGcnError, FloatingPointError):
    exit_code = 3
    code = "numeric"
