"""SQL dialect and connection handling for the supported storage backends.

The store talks to a backend only through this small surface, so the same
claim/write-back logic runs against an embedded SQLite file or a MySQL server.
"""

from __future__ import annotations

import sqlite3
from pathlib import Path
from typing import Any
from urllib.parse import quote

from gridq.config import FieldType, Provider

# Logical column kinds beyond the user field types.
ID, STATUS, TIME, WORKER, MESSAGE, KEY_TEXT = "id", "status", "time", "worker", "message", "key_text"


class Backend:
    placeholder = "?"
    insert_ignore = "INSERT OR IGNORE"
    claim_lock = ""
    # logical kind -> (DDL type, type as reported by introspection)
    types: dict[Any, tuple[str, str]] = {}
    driver_errors: tuple[type[BaseException], ...] = ()

    def connect(self, create: bool) -> Any:
        raise NotImplementedError

    def quote(self, name: str) -> str:
        return '"' + name.replace('"', '""') + '"'

    def begin(self, conn: Any, write: bool) -> None:
        raise NotImplementedError

    def commit(self, conn: Any) -> None:
        conn.commit()

    def rollback(self, conn: Any) -> None:
        conn.rollback()

    def is_transient(self, exc: BaseException) -> bool:
        return False

    def is_missing_table(self, exc: BaseException) -> bool:
        return False

    def table_columns(self, conn: Any, table: str) -> list[tuple[str, str]]:
        """Return ``(name, type)`` pairs in column order; empty if no such table."""
        raise NotImplementedError

    def id_ddl(self) -> str:
        raise NotImplementedError

    def after_create(self, conn: Any, table: str) -> None:
        pass

    def column_type(self, kind: Any) -> str:
        return self.types[kind][0]

    def reported_type(self, kind: Any) -> str:
        return self.types[kind][1]


class SQLiteBackend(Backend):
    types = {
        FieldType.INT: ("INTEGER", "INTEGER"),
        FieldType.REAL: ("REAL", "REAL"),
        FieldType.TEXT: ("TEXT", "TEXT"),
        FieldType.BOOL: ("BOOLEAN", "BOOLEAN"),
        KEY_TEXT: ("TEXT", "TEXT"),
        ID: ("INTEGER", "INTEGER"),
        STATUS: ("TEXT", "TEXT"),
        TIME: ("TEXT", "TEXT"),
        WORKER: ("TEXT", "TEXT"),
        MESSAGE: ("TEXT", "TEXT"),
    }
    driver_errors = (sqlite3.Error,)

    def __init__(self, path: str, busy_timeout: float = 5.0):
        self.path = path
        self.busy_timeout = busy_timeout

    def connect(self, create: bool) -> sqlite3.Connection:
        if self.path == ":memory:":
            target, uri = self.path, False
        elif create:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            target, uri = self.path, False
        else:
            if not Path(self.path).exists():
                raise FileNotFoundError(f"database file {self.path} does not exist")
            target, uri = f"file:{quote(self.path)}?mode=rw", True
        conn = sqlite3.connect(
            target,
            timeout=self.busy_timeout,
            isolation_level=None,
            check_same_thread=False,
            uri=uri,
        )
        conn.execute("PRAGMA synchronous=NORMAL")
        return conn

    def begin(self, conn: sqlite3.Connection, write: bool) -> None:
        conn.execute("BEGIN IMMEDIATE" if write else "BEGIN")

    def commit(self, conn: sqlite3.Connection) -> None:
        conn.execute("COMMIT")

    def rollback(self, conn: sqlite3.Connection) -> None:
        if conn.in_transaction:
            conn.execute("ROLLBACK")

    def is_transient(self, exc: BaseException) -> bool:
        if not isinstance(exc, sqlite3.OperationalError):
            return False
        text = str(exc).lower()
        return "locked" in text or "busy" in text

    def is_missing_table(self, exc: BaseException) -> bool:
        return isinstance(exc, sqlite3.OperationalError) and "no such table" in str(exc)

    def table_columns(self, conn: sqlite3.Connection, table: str) -> list[tuple[str, str]]:
        rows = conn.execute(f"PRAGMA table_info({self.quote(table)})").fetchall()
        return [(r[1], r[2].upper()) for r in rows]

    def id_ddl(self) -> str:
        return "INTEGER PRIMARY KEY AUTOINCREMENT"

    def after_create(self, conn: sqlite3.Connection, table: str) -> None:
        # WAL lets readers (status, export, direct SQL) proceed during claims
        if self.path != ":memory:":
            conn.execute("PRAGMA journal_mode=WAL")


class MySQLBackend(Backend):
    placeholder = "%s"
    insert_ignore = "INSERT IGNORE"
    claim_lock = " FOR UPDATE SKIP LOCKED"
    types = {
        FieldType.INT: ("BIGINT", "bigint"),
        FieldType.REAL: ("DOUBLE", "double"),
        FieldType.TEXT: ("TEXT", "text"),
        FieldType.BOOL: ("TINYINT(1)", "tinyint(1)"),
        KEY_TEXT: ("VARCHAR(255)", "varchar(255)"),
        ID: ("BIGINT", "bigint"),
        STATUS: ("VARCHAR(16)", "varchar(16)"),
        TIME: ("VARCHAR(32)", "varchar(32)"),
        WORKER: ("VARCHAR(255)", "varchar(255)"),
        MESSAGE: ("TEXT", "text"),
    }
    # deadlock, lock wait timeout, server gone away, lost connection
    _transient_codes = {1205, 1213, 2006, 2013}

    def __init__(self, provider: Provider):
        try:
            import pymysql
        except ImportError as exc:
            raise ImportError(
                "the mysql provider needs the 'pymysql' package (pip install pymysql)"
            ) from exc
        self._pymysql = pymysql
        self.provider = provider
        self.driver_errors = (pymysql.MySQLError,)

    def connect(self, create: bool) -> Any:
        p = self.provider
        return self._pymysql.connect(
            host=p.host,
            port=p.port,
            user=p.user,
            password=p.password or "",
            database=p.database,
            autocommit=False,
            charset="utf8mb4",
            # rowcount must report matched rows, not only changed ones
            client_flag=self._pymysql.constants.CLIENT.FOUND_ROWS,
        )

    def quote(self, name: str) -> str:
        return "`" + name.replace("`", "``") + "`"

    def begin(self, conn: Any, write: bool) -> None:
        conn.begin()

    def is_transient(self, exc: BaseException) -> bool:
        args = getattr(exc, "args", ())
        return bool(args) and args[0] in self._transient_codes

    def is_missing_table(self, exc: BaseException) -> bool:
        args = getattr(exc, "args", ())
        return bool(args) and args[0] == 1146

    def table_columns(self, conn: Any, table: str) -> list[tuple[str, str]]:
        with conn.cursor() as cur:
            cur.execute(
                "SELECT column_name, column_type FROM information_schema.columns "
                "WHERE table_schema = DATABASE() AND table_name = %s "
                "ORDER BY ordinal_position",
                (table,),
            )
            return [(r[0], r[1].lower()) for r in cur.fetchall()]

    def id_ddl(self) -> str:
        return "BIGINT AUTO_INCREMENT PRIMARY KEY"


def make_backend(provider: Provider) -> Backend:
    if provider.kind == "sqlite":
        return SQLiteBackend(provider.path)
    if provider.kind == "mysql":
        return MySQLBackend(provider)
    raise ValueError(f"unsupported provider kind {provider.kind!r}")
