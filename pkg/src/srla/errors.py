"""Exception hierarchy.

The CLI prints ``type(err).__name__`` as the machine-parsable error class, so
class names are part of the external interface.
"""

from __future__ import annotations


class SrlaError(Exception):
    """Base class for all package errors."""


class DatasetError(SrlaError):
    pass


class DatasetNotFound(DatasetError):
    pass


class LoadError(DatasetError):
    pass


class ConfigError(SrlaError):
    pass


class InvariantError(SrlaError):
    pass


class SchemaError(SrlaError):
    pass


class UnsupportedVersion(SchemaError):
    pass


class DimensionError(SrlaError):
    pass


class NumericalError(SrlaError):
    pass


class PrerequisiteMissing(SrlaError):
    pass


class EpisodeError(SrlaError):
    pass


class DivergenceError(SrlaError):
    pass
