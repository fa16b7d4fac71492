"""
Exception hierarchy shared by the delineation modules
"""


class McrcError(Exception):
    """Base class for every error raised by the delineation code"""


class ConfigError(McrcError, ValueError):
    """Bad configuration file, unknown key or invalid parameter value"""


class DataError(McrcError, ValueError):
    """Malformed or degenerate input data"""


class NonConvergenceError(McrcError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance"""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals
