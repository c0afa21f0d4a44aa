"""Python bindings for poemform."""

from ._poemform import *  # noqa: F401,F403
from ._poemform import Error, RuntimeFailure, ValidationError, __doc__  # noqa: F401

__version__ = "0.1.0"
