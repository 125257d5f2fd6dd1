"""Exception types shared across the toolkit.

Every anticipated failure raises PapyrionError (or a subclass) with a short,
stable message; the CLI maps these to exit code 1. Anything else escaping is
a bug.
"""

__all__ = ["PapyrionError", "ParameterError"]


class PapyrionError(Exception):
    """Domain error: bad input data, impossible request, degenerate state."""


class ParameterError(PapyrionError):
    """A parameter value is outside its documented range."""
