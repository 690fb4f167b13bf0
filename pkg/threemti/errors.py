"""Exception hierarchy shared by every threemti module."""

from __future__ import annotations

from typing import Iterable


class ThreemtiError(Exception):
    """Base class for all errors raised by threemti."""


class ConfigError(ThreemtiError, ValueError):
    pass


# --- input validation -------------------------------------------------------


class InputError(ThreemtiError, ValueError):
    pass


class InputTooSmall(InputError):
    pass


class BadChannelCount(InputError):
    pass


class BadShape(InputError):
    pass


class CountMismatch(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class RangeError(InputError):
    pass


class TooSmall(InputError):
    pass


# --- warps ------------------------------------------------------------------


class WarpError(ThreemtiError, ValueError):
    pass


class BadRange(WarpError):
    pass


class SingularWarp(WarpError):
    pass


# --- data -------------------------------------------------------------------


class DataError(ThreemtiError):
    pass


class EmptyDataset(DataError):
    pass


class ManifestFormatError(DataError, ValueError):
    pass


class ManifestValidationError(DataError):
    def __init__(self, ids: Iterable[str], detail: str = "referenced files missing"):
        self.ids = list(ids)
        super().__init__(f"Manifest validation failed ({detail}): {', '.join(self.ids)}")


# --- models -----------------------------------------------------------------


class ModelError(ThreemtiError):
    pass


class ModeError(ModelError):
    pass


class NoMatch(ModelError):
    pass


class AdaptersAbsent(ModelError):
    pass


class ConfigMismatch(ModelError):
    pass


class CheckpointFormatError(ModelError):
    pass


# --- training ---------------------------------------------------------------


class TrainingError(ThreemtiError):
    pass


class DivergedError(TrainingError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"Loss diverged at step {step} (value={value})")
