"""Exception types shared across the toolkit."""


class SubcatError(Exception):
    """Base class for all toolkit errors."""


class LabelParseError(SubcatError, ValueError):
    """A label line could not be parsed.

    ``token_index`` is the 1-based index of the offending (or missing) token.
    """

    def __init__(self, message, token_index=None):
        super().__init__(message)
        self.token_index = token_index


class DegenerateGeometryError(SubcatError, ValueError):
    """Geometry is degenerate (e.g. an object at the exact camera origin)."""


class NotFittedError(SubcatError, ValueError, AttributeError):
    """An estimator was used before ``fit``.

    Inherits ``ValueError``/``AttributeError`` so generic sklearn-style
    handling catches it.
    """


class ConfigError(SubcatError, ValueError):
    """A run configuration is invalid (maps to CLI exit code 2)."""
