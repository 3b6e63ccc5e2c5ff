"""Converter from PPG-DaLiA pickle archives to interchange format v1."""

__version__ = "0.1.0"

from .convert import ConversionError, convert  # noqa: E402,F401
