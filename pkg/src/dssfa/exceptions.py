"""Exceptions raised by the dssfa package.

The command line front end maps them onto exit codes, see
:mod:`dssfa.factor_analyse`.
"""


class DSSFAError(Exception):
    """Base class of all dssfa errors"""


class ConfigError(DSSFAError, ValueError):
    """Invalid settings value. The message names the field"""


class DimensionError(DSSFAError, ValueError):
    """Matrices with incompatible shapes"""


class NumericalError(DSSFAError, ArithmeticError):
    """Failed factorization or non-finite numbers"""


class DrawsFormatError(DSSFAError, ValueError):
    """A posterior draws file could not be parsed or validated"""


class MissingFullModelError(DSSFAError, KeyError):
    """The fit path has no unpenalized fit at the posterior dimension"""


class DataFormatError(DSSFAError, ValueError):
    """A data file has an unexpected header or incomplete rows"""


class FitPathFormatError(DSSFAError, ValueError):
    """A fit path file is not valid json or misses fields"""
