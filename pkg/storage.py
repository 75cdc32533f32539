from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
import json
import os
import sqlite3
import threading
from typing import Any, Iterable

RUN_STATUSES = ("running", "finished", "failed")


@dataclass
class RunRecord:
    id: int
    kind: str
    status: str
    config: dict[str, Any]
    checkpoint_path: str | None
    data_dir: str | None
    error: str | None
    created_at: str
    finished_at: str | None


@dataclass
class EvalRecord:
    id: int
    run_id: int
    checkpoint_path: str | None
    report: dict[str, Any]
    created_at: str


def _now() -> str:
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


class Storage:
    def __init__(self, db_path: str) -> None:
        self._db_path = db_path
        directory = os.path.dirname(db_path)
        if directory and db_path != ":memory:":
            os.makedirs(directory, exist_ok=True)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self._db_path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._init_schema()

    def _init_schema(self) -> None:
        schema = """
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            kind TEXT NOT NULL,
            status TEXT NOT NULL,
            config TEXT,
            checkpoint_path TEXT,
            data_dir TEXT,
            error TEXT,
            created_at TEXT NOT NULL,
            finished_at TEXT
        );

        CREATE TABLE IF NOT EXISTS train_steps (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            step INTEGER NOT NULL,
            lr REAL,
            total REAL,
            parts TEXT
        );

        CREATE INDEX IF NOT EXISTS idx_train_steps_run_id_step
            ON train_steps (run_id, step);

        CREATE TABLE IF NOT EXISTS eval_reports (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            checkpoint_path TEXT,
            report TEXT,
            created_at TEXT NOT NULL
        );
        """
        with self._lock:
            self._conn.executescript(schema)
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def _execute(self, sql: str, params: Iterable[Any] = ()) -> sqlite3.Cursor:
        with self._lock:
            cur = self._conn.execute(sql, params)
            self._conn.commit()
            return cur

    def _query_one(self, sql: str, params: Iterable[Any] = ()) -> sqlite3.Row | None:
        with self._lock:
            cur = self._conn.execute(sql, params)
            return cur.fetchone()

    def _query_all(self, sql: str, params: Iterable[Any] = ()) -> list[sqlite3.Row]:
        with self._lock:
            cur = self._conn.execute(sql, params)
            return cur.fetchall()

    @staticmethod
    def _json_dumps(data: Any) -> str:
        return json.dumps(data, ensure_ascii=False, separators=(",", ":"))

    @staticmethod
    def _json_loads(data: str | None) -> dict[str, Any]:
        if not data:
            return {}
        try:
            return json.loads(data)
        except json.JSONDecodeError:
            return {}

    def _run_from_row(self, row: sqlite3.Row) -> RunRecord:
        return RunRecord(
            id=row["id"],
            kind=row["kind"],
            status=row["status"],
            config=self._json_loads(row["config"]),
            checkpoint_path=row["checkpoint_path"],
            data_dir=row["data_dir"],
            error=row["error"],
            created_at=row["created_at"],
            finished_at=row["finished_at"],
        )

    def create_run(self, kind: str, config: dict[str, Any], *, data_dir: str | None = None) -> int:
        cur = self._execute(
            "INSERT INTO runs (kind, status, config, data_dir, created_at) VALUES (?, ?, ?, ?, ?)",
            (kind, "running", self._json_dumps(config), data_dir, _now()),
        )
        return int(cur.lastrowid)

    def finish_run(
        self,
        run_id: int,
        status: str,
        *,
        checkpoint_path: str | None = None,
        error: str | None = None,
    ) -> None:
        if status not in RUN_STATUSES:
            raise ValueError(f"unknown run status {status!r}")
        self._execute(
            """
            UPDATE runs
            SET status = ?, checkpoint_path = COALESCE(?, checkpoint_path), error = ?, finished_at = ?
            WHERE id = ?
            """,
            (status, checkpoint_path, error, _now(), run_id),
        )

    def get_run(self, run_id: int) -> RunRecord | None:
        row = self._query_one("SELECT * FROM runs WHERE id = ?", (run_id,))
        return self._run_from_row(row) if row else None

    def get_runs(self, *, kind: str | None = None, limit: int = 200) -> list[RunRecord]:
        if kind:
            rows = self._query_all("SELECT * FROM runs WHERE kind = ? ORDER BY id DESC LIMIT ?", (kind, limit))
        else:
            rows = self._query_all("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
        return [self._run_from_row(row) for row in rows]

    def log_train_step(self, run_id: int, record: dict[str, Any]) -> None:
        parts = {key: value for key, value in record.items() if key not in ("step", "lr", "total")}
        self._execute(
            "INSERT INTO train_steps (run_id, step, lr, total, parts) VALUES (?, ?, ?, ?, ?)",
            (run_id, int(record["step"]), record.get("lr"), record.get("total"), self._json_dumps(parts)),
        )

    def get_train_steps(self, run_id: int) -> list[dict[str, Any]]:
        rows = self._query_all(
            "SELECT step, lr, total, parts FROM train_steps WHERE run_id = ? ORDER BY step, id", (run_id,)
        )
        return [
            {"step": row["step"], "lr": row["lr"], "total": row["total"], **self._json_loads(row["parts"])}
            for row in rows
        ]

    def save_eval_report(self, run_id: int, report: dict[str, Any], *, checkpoint_path: str | None = None) -> int:
        cur = self._execute(
            "INSERT INTO eval_reports (run_id, checkpoint_path, report, created_at) VALUES (?, ?, ?, ?)",
            (run_id, checkpoint_path, self._json_dumps(report), _now()),
        )
        return int(cur.lastrowid)

    def get_eval_reports(self, run_id: int) -> list[EvalRecord]:
        rows = self._query_all("SELECT * FROM eval_reports WHERE run_id = ? ORDER BY id", (run_id,))
        return [
            EvalRecord(
                id=row["id"],
                run_id=row["run_id"],
                checkpoint_path=row["checkpoint_path"],
                report=self._json_loads(row["report"]),
                created_at=row["created_at"],
            )
            for row in rows
        ]
