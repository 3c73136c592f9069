"""Shared test helpers: independent oracles that read the database directly."""

from __future__ import annotations

import os
import sqlite3
import subprocess
import sys
from pathlib import Path

REPO_SRC = str(Path(__file__).resolve().parents[1] / "src")

DEMO = """\
[study]
table = demo
provider = sqlite:{db}

[keyfields]
a:int = 1, 2, 3
b:text = x, y

[resultfields]
score:real
"""


def write_config(tmp_path: Path, text: str = DEMO, name: str = "study.ini", db: str = "study.db") -> Path:
    path = tmp_path / name
    path.write_text(text.format(db=tmp_path / db), encoding="utf-8")
    return path


def gridq(*args: str, cwd: Path | None = None, timeout: float = 120) -> subprocess.CompletedProcess:
    env = dict(os.environ)
    env["PYTHONPATH"] = REPO_SRC + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.run(
        [sys.executable, "-m", "gridq", *args],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
        timeout=timeout,
    )


def gridq_popen(*args: str, **kwargs) -> subprocess.Popen:
    env = dict(os.environ)
    env["PYTHONPATH"] = REPO_SRC + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.Popen(
        [sys.executable, "-m", "gridq", *args],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
        env=env,
        **kwargs,
    )


def query(db: Path, sql: str, params: tuple = ()) -> list[tuple]:
    conn = sqlite3.connect(db)
    try:
        return conn.execute(sql, params).fetchall()
    finally:
        conn.close()


def direct_rows(db: Path, table: str = "demo") -> list[dict]:
    conn = sqlite3.connect(db)
    conn.row_factory = sqlite3.Row
    try:
        return [dict(r) for r in conn.execute(f'SELECT * FROM "{table}" ORDER BY id')]
    finally:
        conn.close()


def install_transition_log(db: Path, table: str = "demo") -> None:
    """Record every status change at the database level, whoever makes it."""
    conn = sqlite3.connect(db)
    try:
        conn.executescript(
            f"""
            CREATE TABLE IF NOT EXISTS _transitions (row_id INTEGER, old TEXT, new TEXT);
            CREATE TRIGGER IF NOT EXISTS "_record_{table}" AFTER UPDATE OF status ON "{table}"
            WHEN OLD.status IS NOT NEW.status
            BEGIN
                INSERT INTO _transitions VALUES (OLD.id, OLD.status, NEW.status);
            END;
            """
        )
    finally:
        conn.close()


def recorded_transitions(db: Path) -> list[tuple[int, str, str]]:
    return query(db, "SELECT row_id, old, new FROM _transitions ORDER BY rowid")


LEGAL = {
    ("CREATED", "RUNNING"),
    ("RUNNING", "DONE"),
    ("RUNNING", "ERROR"),
    ("RUNNING", "CREATED"),
    ("DONE", "CREATED"),
    ("ERROR", "CREATED"),
}


def check_row_invariants(rows: list[dict], result_names: list[str]) -> list[str]:
    """Return violated row-consistency rules (empty when all rows are sound)."""
    problems = []
    for r in rows:
        rid, st = r["id"], r["status"]
        if st == "CREATED":
            for col in ("start_time", "end_time", "worker_id", "error_message", *result_names):
                if r[col] is not None:
                    problems.append(f"{rid}: CREATED row has {col}")
        elif st == "RUNNING":
            if r["start_time"] is None or r["worker_id"] is None:
                problems.append(f"{rid}: RUNNING row lacks start_time/worker_id")
            if r["end_time"] is not None:
                problems.append(f"{rid}: RUNNING row has end_time")
        elif st in ("DONE", "ERROR"):
            if None in (r["start_time"], r["end_time"], r["worker_id"]):
                problems.append(f"{rid}: finished row lacks timestamps/worker")
            elif r["end_time"] < r["start_time"]:
                problems.append(f"{rid}: end_time before start_time")
        else:
            problems.append(f"{rid}: unknown status {st!r}")
        if (r["error_message"] is not None) != (st == "ERROR"):
            problems.append(f"{rid}: error_message presence does not match status {st}")
    return problems


def parse_rfc4180(text: str) -> list[list[str | None]]:
    """Minimal RFC 4180 reader; unquoted empty fields come back as None."""
    records: list[list[str | None]] = []
    record: list[str | None] = []
    i, n = 0, len(text)
    while i < n:
        if text[i] == '"':
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise ValueError("unterminated quoted field")
                if text[i] == '"':
                    if i + 1 < n and text[i + 1] == '"':
                        buf.append('"')
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(text[i])
                i += 1
            record.append("".join(buf))
        else:
            j = i
            while j < n and text[j] not in ',\n':
                if text[j] == '"':
                    raise ValueError(f"bare quote at offset {j}")
                j += 1
            record.append(text[i:j] or None)
            i = j
        if i >= n:
            records.append(record)
            break
        if text[i] == ",":
            i += 1
            if i >= n:
                record.append(None)
                records.append(record)
            continue
        if text[i] == "\n":
            records.append(record)
            record = []
            i += 1
            continue
        raise ValueError(f"unexpected character {text[i]!r} at offset {i}")
    return records
