from __future__ import annotations


class PersistKitError(Exception):
    """Base class for every error raised by persistkit."""


class RegionError(PersistKitError):
    """Region could not be created or opened."""


class FaultError(PersistKitError):
    """Access outside the region or outside any arena."""


class OutOfSpaceError(PersistKitError):
    pass


class UnsupportedOperation(PersistKitError):
    pass


class ConfigError(PersistKitError, ValueError):
    pass


class AlreadyInitialized(PersistKitError):
    pass


class NotInitialized(PersistKitError):
    pass


class CorruptionError(PersistKitError):
    """Persistent state failed validation during reconstruction."""


class DuplicateKeyError(PersistKitError, KeyError):
    pass


class KeyNotFound(PersistKitError, KeyError):
    pass


class InvalidKeyError(PersistKitError, ValueError):
    pass
