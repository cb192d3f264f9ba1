"""SQLite run ledger."""

import os
import sqlite3
from collections.abc import Iterator
from contextlib import contextmanager

DB_PATH = "dualflow-runs.db"
DB_ENV = "DUALFLOW_DB"


def db_path() -> str:
    return os.environ.get(DB_ENV, DB_PATH)


def init_db() -> None:
    """Create the runs table if it does not exist."""
    with get_db_connection() as conn:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                name TEXT PRIMARY KEY,
                created_at TEXT NOT NULL,
                kind TEXT NOT NULL,
                config_text TEXT,
                checkpoint_path TEXT,
                metrics_path TEXT,
                final_epe REAL
            )
        """)
        conn.commit()


@contextmanager
def get_db_connection() -> Iterator[sqlite3.Connection]:
    conn = sqlite3.connect(db_path())
    try:
        conn.row_factory = sqlite3.Row
        yield conn
    finally:
        conn.close()
