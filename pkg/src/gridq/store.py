"""The experiment table: schema, population, claiming, write-back, reset, export.

Every public operation runs in its own backend transaction. Nothing here relies
on in-process locks, so any number of threads, processes or machines may share
one table as long as each uses its own :class:`Store`.
"""

from __future__ import annotations

import enum
import logging
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, TypeVar

from gridq import backends
from gridq.backends import Backend, make_backend
from gridq.config import FieldType, StudyConfig, Value, coerce_value, parse_provider
from gridq.grid import ExperimentKey

log = logging.getLogger(__name__)

T = TypeVar("T")

MAX_ERROR_BYTES = 8192
RETRY_ATTEMPTS = 8
RETRY_BASE_DELAY = 0.010
RETRY_FACTOR = 2.0

EXECUTION_COLUMNS = ("start_time", "end_time", "worker_id", "error_message")


class Status(str, enum.Enum):
    CREATED = "CREATED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    ERROR = "ERROR"

    def __str__(self) -> str:
        return self.value


LEGAL_TRANSITIONS = frozenset(
    {
        (Status.CREATED, Status.RUNNING),
        (Status.RUNNING, Status.DONE),
        (Status.RUNNING, Status.ERROR),
        (Status.RUNNING, Status.CREATED),
        (Status.DONE, Status.CREATED),
        (Status.ERROR, Status.CREATED),
    }
)


class StoreError(Exception):
    """The backend failed or could not be reached."""


class TableMissingError(StoreError):
    pass


class SchemaConflictError(StoreError):
    def __init__(self, column: str, detail: str):
        self.column = column
        super().__init__(f"table exists with a conflicting schema at column {column!r}: {detail}")


class ProtocolError(Exception):
    """An operation was attempted on a row in the wrong state."""


class FieldError(ValueError):
    """Unknown result field or a value of the wrong type."""


@dataclass(frozen=True)
class ClaimedExperiment:
    id: int
    key: ExperimentKey
    claim_time: str


@dataclass(frozen=True)
class ExperimentRow:
    id: int
    key: dict[str, Value]
    status: Status
    creation_time: str
    start_time: str | None
    end_time: str | None
    worker_id: str | None
    error_message: str | None
    results: dict[str, Value | None]


@dataclass(frozen=True)
class Snapshot:
    """Consistent export of (part of) the table, ordered by id."""

    columns: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]

    def __len__(self) -> int:
        return len(self.rows)

    def as_dicts(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, row)) for row in self.rows]


def utc_now() -> str:
    """UTC ISO-8601 timestamp with millisecond precision."""
    now = datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%S.") + f"{now.microsecond // 1000:03d}Z"


def truncate_utf8(text: str, limit: int = MAX_ERROR_BYTES) -> str:
    data = text.encode("utf-8")
    if len(data) <= limit:
        return text
    # "ignore" drops only the partial character cut at the boundary
    return data[:limit].decode("utf-8", "ignore")


def retry_transient(
    fn: Callable[[], T],
    is_transient: Callable[[BaseException], bool],
    attempts: int = RETRY_ATTEMPTS,
    base_delay: float = RETRY_BASE_DELAY,
    factor: float = RETRY_FACTOR,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    delay = base_delay
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except Exception as exc:
            if not is_transient(exc) or attempt == attempts:
                raise
            log.debug("transient backend error (attempt %d/%d): %s", attempt, attempts, exc)
            sleep(delay)
            delay *= factor
    raise AssertionError("unreachable")


class Store:
    """Handle on one study table. Not meant to be shared between threads."""

    def __init__(self, cfg: StudyConfig, backend: Backend, conn: Any):
        self.cfg = cfg
        self.backend = backend
        self.conn = conn
        q = backend.quote
        self._table = q(cfg.table_name)
        self._key_cols = [q(n) for n in cfg.key_names]
        self._columns = (
            ["id", *cfg.key_names, "status", "creation_time", *EXECUTION_COLUMNS, *cfg.result_names]
        )
        self._select_all = ", ".join(q(c) for c in self._columns)
        self._types: dict[str, FieldType] = {f.name: f.type for f in cfg.key_fields}
        self._types.update({f.name: f.type for f in cfg.result_fields})

    @classmethod
    def connect(cls, cfg: StudyConfig, create: bool = False) -> Store:
        """Open a connection. Without ``create`` a missing sqlite file is an error."""
        try:
            backend = make_backend(parse_provider(cfg.provider))
            conn = backend.connect(create)
        except Exception as exc:
            raise StoreError(f"cannot open backend: {exc}") from exc
        return cls(cfg, backend, conn)

    def close(self) -> None:
        try:
            self.conn.close()
        except Exception:  # closing a broken connection is best effort
            pass

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    # -- transaction plumbing ------------------------------------------------

    def _transaction(self, body: Callable[[Any], T], write: bool = True) -> T:
        b = self.backend

        def attempt() -> T:
            b.begin(self.conn, write)
            try:
                cur = self.conn.cursor()
                result = body(cur)
                b.commit(self.conn)
                return result
            except BaseException:
                try:
                    b.rollback(self.conn)
                except Exception:
                    pass
                raise

        try:
            return retry_transient(attempt, b.is_transient)
        except b.driver_errors as exc:
            if b.is_missing_table(exc):
                raise TableMissingError(f"table {self.cfg.table_name!r} does not exist") from exc
            raise StoreError(str(exc)) from exc

    def _sql(self, text: str) -> str:
        return text.replace("?", self.backend.placeholder) if self.backend.placeholder != "?" else text

    def _encode(self, value: Value | None) -> Any:
        if isinstance(value, bool):
            return int(value)
        return value

    def _decode(self, name: str, value: Any) -> Any:
        if value is None:
            return None
        ftype = self._types.get(name)
        if ftype is FieldType.BOOL:
            return bool(value)
        if ftype is FieldType.REAL:
            return float(value)
        if ftype is FieldType.INT:
            return int(value)
        return value

    # -- schema ----------------------------------------------------------------

    def expected_schema(self) -> list[tuple[str, Any]]:
        """Ordered ``(column, logical kind)`` pairs of the experiment table."""
        cols: list[tuple[str, Any]] = [("id", backends.ID)]
        for kf in self.cfg.key_fields:
            cols.append((kf.name, backends.KEY_TEXT if kf.type is FieldType.TEXT else kf.type))
        cols += [
            ("status", backends.STATUS),
            ("creation_time", backends.TIME),
            ("start_time", backends.TIME),
            ("end_time", backends.TIME),
            ("worker_id", backends.WORKER),
            ("error_message", backends.MESSAGE),
        ]
        cols += [(rf.name, rf.type) for rf in self.cfg.result_fields]
        return cols

    def _check_schema(self, actual: list[tuple[str, str]]) -> None:
        expected = self.expected_schema()
        for i, (name, kind) in enumerate(expected):
            want_type = self.backend.reported_type(kind)
            if i >= len(actual):
                raise SchemaConflictError(name, "column is missing")
            got_name, got_type = actual[i]
            if got_name != name:
                raise SchemaConflictError(name, f"found column {got_name!r} in its place")
            if got_type != want_type:
                raise SchemaConflictError(name, f"type is {got_type}, expected {want_type}")
        if len(actual) > len(expected):
            raise SchemaConflictError(actual[len(expected)][0], "unexpected extra column")

    def table_exists(self) -> bool:
        return bool(self._transaction(lambda cur: self.backend.table_columns(self.conn, self.cfg.table_name), write=False))

    def create_table(self) -> bool:
        """Create the table if absent; returns True when it was created."""
        b = self.backend

        def body(cur: Any) -> bool:
            actual = b.table_columns(self.conn, self.cfg.table_name)
            if actual:
                self._check_schema(actual)
                return False
            defs = []
            for name, kind in self.expected_schema():
                if name == "id":
                    defs.append(f"{b.quote(name)} {b.id_ddl()}")
                elif name in ("status", "creation_time"):
                    defs.append(f"{b.quote(name)} {b.column_type(kind)} NOT NULL")
                else:
                    defs.append(f"{b.quote(name)} {b.column_type(kind)}")
            defs.append(f"UNIQUE ({', '.join(self._key_cols)})")
            cur.execute(f"CREATE TABLE {self._table} ({', '.join(defs)})")
            index = b.quote(f"{self.cfg.table_name}_status_idx")
            cur.execute(f"CREATE INDEX {index} ON {self._table} ({b.quote('status')}, {b.quote('id')})")
            return True

        created = self._transaction(body)
        if created:
            try:
                self.backend.after_create(self.conn, self.cfg.table_name)
            except self.backend.driver_errors as exc:
                log.warning("post-create tuning failed: %s", exc)
        return created

    # -- population --------------------------------------------------------------

    def _key_params(self, key: ExperimentKey) -> list[Any]:
        if list(key) != self.cfg.key_names:
            raise FieldError(f"experiment key fields {list(key)} do not match {self.cfg.key_names}")
        params = []
        for kf in self.cfg.key_fields:
            try:
                params.append(self._encode(coerce_value(kf.type, key[kf.name])))
            except TypeError as exc:
                raise FieldError(f"key field {kf.name!r}: {exc}") from None
        return params

    def fill_table(self, keys: Iterable[ExperimentKey]) -> int:
        """Insert a CREATED row for every key not yet present; returns the count."""
        now = utc_now()
        params = [[*self._key_params(k), Status.CREATED.value, now] for k in keys]
        if not params:
            return 0
        cols = ", ".join([*self._key_cols, self.backend.quote("status"), self.backend.quote("creation_time")])
        marks = ", ".join("?" * (len(self._key_cols) + 2))
        sql = self._sql(f"{self.backend.insert_ignore} INTO {self._table} ({cols}) VALUES ({marks})")

        def body(cur: Any) -> int:
            cur.executemany(sql, params)
            return max(cur.rowcount, 0)

        return self._transaction(body)

    # -- claiming and write-back -----------------------------------------------

    def claim_next(self, worker_id: str) -> ClaimedExperiment | None:
        """Atomically move the lowest-id CREATED row to RUNNING for ``worker_id``."""
        if not worker_id:
            raise ValueError("worker_id must be non-empty")
        q = self.backend.quote
        select = self._sql(
            f"SELECT id, {', '.join(self._key_cols)} FROM {self._table} "
            f"WHERE {q('status')} = ? ORDER BY id LIMIT 1{self.backend.claim_lock}"
        )
        update = self._sql(
            f"UPDATE {self._table} SET {q('status')} = ?, {q('start_time')} = ?, {q('worker_id')} = ? "
            f"WHERE id = ? AND {q('status')} = ?"
        )

        def body(cur: Any) -> ClaimedExperiment | None:
            cur.execute(select, (Status.CREATED.value,))
            row = cur.fetchone()
            if row is None:
                return None
            now = utc_now()
            cur.execute(update, (Status.RUNNING.value, now, worker_id, row[0], Status.CREATED.value))
            if cur.rowcount != 1:
                raise StoreError(f"lost claim race on row {row[0]} despite row lock")
            key = ExperimentKey(
                (name, self._decode(name, v)) for name, v in zip(self.cfg.key_names, row[1:])
            )
            return ClaimedExperiment(int(row[0]), key, now)

        return self._transaction(body)

    def _require_running(self, cur: Any, row_id: int) -> None:
        cur.execute(self._sql(f"SELECT {self.backend.quote('status')} FROM {self._table} WHERE id = ?"), (row_id,))
        row = cur.fetchone()
        if row is None:
            raise ProtocolError(f"no experiment with id {row_id}")
        raise ProtocolError(f"row not RUNNING (experiment {row_id} is {row[0]})")

    def write_result(self, row_id: int, field_name: str, value: Any) -> None:
        rf = self.cfg.result_field(field_name)
        if rf is None:
            raise FieldError(f"unknown result field {field_name!r}")
        try:
            value = coerce_value(rf.type, value)
        except TypeError as exc:
            raise FieldError(f"result field {field_name!r}: {exc}") from None
        q = self.backend.quote
        sql = self._sql(f"UPDATE {self._table} SET {q(field_name)} = ? WHERE id = ? AND {q('status')} = ?")

        def body(cur: Any) -> None:
            cur.execute(sql, (self._encode(value), row_id, Status.RUNNING.value))
            if cur.rowcount != 1:
                self._require_running(cur, row_id)

        self._transaction(body)

    def _finish(self, row_id: int, status: Status, message: str | None) -> None:
        q = self.backend.quote
        now = utc_now()
        # end_time never precedes start_time, even across skewed clocks
        sql = self._sql(
            f"UPDATE {self._table} SET {q('status')} = ?, "
            f"{q('end_time')} = CASE WHEN {q('start_time')} > ? THEN {q('start_time')} ELSE ? END, "
            f"{q('error_message')} = ? WHERE id = ? AND {q('status')} = ?"
        )

        def body(cur: Any) -> None:
            cur.execute(sql, (status.value, now, now, message, row_id, Status.RUNNING.value))
            if cur.rowcount != 1:
                self._require_running(cur, row_id)

        self._transaction(body)

    def mark_done(self, row_id: int) -> None:
        self._finish(row_id, Status.DONE, None)

    def mark_error(self, row_id: int, message: str) -> None:
        if not message:
            raise ValueError("error message must be non-empty")
        self._finish(row_id, Status.ERROR, truncate_utf8(message))

    # -- maintenance -------------------------------------------------------------

    def reset(self, statuses: Iterable[Status | str]) -> int:
        """Return rows with the given statuses to CREATED, clearing execution data."""
        wanted = sorted({Status(s) for s in statuses})
        if not wanted:
            raise ValueError("reset needs at least one status")
        q = self.backend.quote
        cleared = [*EXECUTION_COLUMNS, *self.cfg.result_names]
        sets = ", ".join([f"{q('status')} = ?", *(f"{q(c)} = NULL" for c in cleared)])
        marks = ", ".join("?" * len(wanted))
        sql = self._sql(f"UPDATE {self._table} SET {sets} WHERE {q('status')} IN ({marks})")

        def body(cur: Any) -> int:
            cur.execute(sql, (Status.CREATED.value, *(s.value for s in wanted)))
            return cur.rowcount

        return self._transaction(body)

    def export(self, statuses: Iterable[Status | str] | None = None) -> Snapshot:
        q = self.backend.quote
        sql = f"SELECT {self._select_all} FROM {self._table}"
        params: Sequence[str] = ()
        if statuses is not None:
            wanted = sorted({Status(s) for s in statuses})
            if not wanted:
                return Snapshot(tuple(self._columns), ())
            params = [s.value for s in wanted]
            sql += f" WHERE {q('status')} IN ({', '.join('?' * len(params))})"
        sql = self._sql(sql + " ORDER BY id")

        def body(cur: Any) -> list[tuple]:
            cur.execute(sql, params)
            return cur.fetchall()

        rows = self._transaction(body, write=False)
        decoded = tuple(
            tuple(self._decode(name, v) for name, v in zip(self._columns, row)) for row in rows
        )
        return Snapshot(tuple(self._columns), decoded)

    def rows(self, statuses: Iterable[Status | str] | None = None) -> list[ExperimentRow]:
        out = []
        for rec in self.export(statuses).as_dicts():
            out.append(
                ExperimentRow(
                    id=rec["id"],
                    key={n: rec[n] for n in self.cfg.key_names},
                    status=Status(rec["status"]),
                    creation_time=rec["creation_time"],
                    start_time=rec["start_time"],
                    end_time=rec["end_time"],
                    worker_id=rec["worker_id"],
                    error_message=rec["error_message"],
                    results={n: rec[n] for n in self.cfg.result_names},
                )
            )
        return out

    def status_counts(self) -> dict[Status, int]:
        sql = f"SELECT {self.backend.quote('status')}, COUNT(*) FROM {self._table} GROUP BY {self.backend.quote('status')}"

        def body(cur: Any) -> list[tuple]:
            cur.execute(sql)
            return cur.fetchall()

        counts = {s: 0 for s in Status}
        for status, n in self._transaction(body, write=False):
            counts[Status(status)] = int(n)
        return counts
