"""Lazy schema migration over a simulated range-partitioned database."""

from .catalog import (
    TRUE,
    Agg,
    Catalog,
    CatalogError,
    ColumnDef,
    Cond,
    MigrationHandle,
    MigrationSpec,
    NewTableSpec,
    Predicate,
    RewriteUnsupported,
    parse_migration_spec,
)
from .engine import CostModel, Database
from .txn import (
    DuplicateKey,
    Incr,
    LockWait,
    SchemaRetired,
    SchemaUnavailable,
    Statement,
    TxnAborted,
    TxnError,
)
from .background import DrainConfig, drain_step, drain_until_done

__all__ = [
    "TRUE", "Agg", "Catalog", "CatalogError", "ColumnDef", "Cond", "MigrationHandle", "MigrationSpec",
    "NewTableSpec", "Predicate", "RewriteUnsupported", "parse_migration_spec", "CostModel", "Database",
    "DuplicateKey", "Incr", "LockWait", "SchemaRetired", "SchemaUnavailable", "Statement", "TxnAborted",
    "TxnError", "DrainConfig", "drain_step", "drain_until_done",
]
