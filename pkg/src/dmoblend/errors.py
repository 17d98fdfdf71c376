"""Exception types raised across the package."""

from __future__ import annotations


class DMOError(Exception):
    """Base class for package errors."""


class ShapeError(DMOError, ValueError):
    """An array does not match the extents of the problem instance or model."""


class CheckpointError(DMOError):
    """A checkpoint file could not be read."""


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class HyperparameterMismatchError(CheckpointError):
    pass


class DatasetFormatError(DMOError):
    pass
