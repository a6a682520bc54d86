"""Partly persistent data structures over a cache-line accounted persistent region."""
from .bptree import RecoverableBPlusTree
from .dlist import RecoverableList
from .errors import (
    AlreadyInitialized,
    ConfigError,
    CorruptionError,
    DuplicateKeyError,
    FaultError,
    InvalidKeyError,
    KeyNotFound,
    NotInitialized,
    OutOfSpaceError,
    PersistKitError,
    RegionError,
    UnsupportedOperation,
)
from .hashmap import RecoverableHashMap
from .region import (
    DROP_ALL_PENDING,
    KEEP_ALL_PENDING,
    Arena,
    Backend,
    CrashPolicy,
    FencePolicy,
    PersistentRegion,
    RunStats,
    create_region,
    open_region,
    random_subset,
)
from .staging import Mode
from .workload import Structure, WorkloadSpec

__all__ = [
    "AlreadyInitialized",
    "Arena",
    "Backend",
    "ConfigError",
    "CorruptionError",
    "CrashPolicy",
    "DROP_ALL_PENDING",
    "DuplicateKeyError",
    "FaultError",
    "FencePolicy",
    "InvalidKeyError",
    "KEEP_ALL_PENDING",
    "KeyNotFound",
    "Mode",
    "NotInitialized",
    "OutOfSpaceError",
    "PersistKitError",
    "PersistentRegion",
    "RecoverableBPlusTree",
    "RecoverableHashMap",
    "RecoverableList",
    "RegionError",
    "RunStats",
    "Structure",
    "UnsupportedOperation",
    "WorkloadSpec",
    "create_region",
    "open_region",
    "random_subset",
]
