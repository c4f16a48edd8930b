"""Exception hierarchy.

``UserError`` subclasses describe bad input or configuration and map to CLI
exit status 2. ``InternalError`` subclasses are invariant violations (exit 3).
"""


class MacAuditError(Exception):
    pass


class UserError(MacAuditError):
    pass


class InternalError(MacAuditError):
    pass


class ShapeError(UserError, ValueError):
    pass


class ParseError(UserError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SplitError(UserError, ValueError):
    pass


class DegenerateError(UserError, ValueError):
    """A class with no samples where at least one is required."""


class ConfigError(UserError, ValueError):
    pass


class FormatError(UserError, ValueError):
    """Corrupt, truncated or incompatible model file."""


class DataError(UserError, ValueError):
    pass


class NumericError(InternalError, FloatingPointError):
    pass


class ConsistencyError(InternalError, RuntimeError):
    """Backward called with a cache that no longer matches the parameters."""


class RangeError(UserError, ValueError):
    pass
