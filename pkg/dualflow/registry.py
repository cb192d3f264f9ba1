"""Registration and lookup of training and ablation runs."""

from __future__ import annotations

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Literal

from dualflow.db import get_db_connection, init_db

logger = logging.getLogger(__name__)

RunKind = Literal["train", "ablate"]


def register_run(
    name: str,
    kind: RunKind,
    config_text: str,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    final_epe: float | None = None,
) -> None:
    """Insert a run, or replace the stored record of a run with the same name."""
    init_db()
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with get_db_connection() as conn:
        conn.execute(
            """
            INSERT INTO runs (name, created_at, kind, config_text, checkpoint_path, metrics_path, final_epe)
            VALUES (?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(name) DO UPDATE SET
                created_at=excluded.created_at,
                kind=excluded.kind,
                config_text=excluded.config_text,
                checkpoint_path=excluded.checkpoint_path,
                metrics_path=excluded.metrics_path,
                final_epe=excluded.final_epe
            """,
            (
                name,
                created,
                kind,
                config_text,
                None if checkpoint_path is None else str(checkpoint_path),
                None if metrics_path is None else str(metrics_path),
                final_epe,
            ),
        )
        conn.commit()
    logger.debug("Registered %s run %s", kind, name)


def list_runs() -> list[dict[str, Any]]:
    init_db()
    with get_db_connection() as conn:
        cursor = conn.execute(
            "SELECT name, created_at, kind, checkpoint_path, metrics_path, final_epe FROM runs ORDER BY created_at, name"
        )
        return [dict(row) for row in cursor.fetchall()]


def get_run(name: str) -> dict[str, Any] | None:
    init_db()
    with get_db_connection() as conn:
        row = conn.execute("SELECT * FROM runs WHERE name = ?", (name,)).fetchone()
        return dict(row) if row else None
