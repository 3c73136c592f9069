"""Worker loop: claim open experiments, run the user function, finalize rows."""

from __future__ import annotations

import logging
import os
import secrets
import socket
import threading
import time
import traceback
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any

from gridq.config import StudyConfig
from gridq.store import ClaimedExperiment, ProtocolError, Status, Store, StoreError

log = logging.getLogger(__name__)


class ExperimentFailed(Exception):
    """Raised by an experiment function to fail with a prepared diagnostic.

    Unlike other exceptions no Python traceback is appended to the stored
    message; ``detail`` (e.g. a child's stderr) is used instead.
    """

    def __init__(self, message: str, detail: str = ""):
        super().__init__(message)
        self.message = message
        self.detail = detail


class ResultSink:
    """Write-back channel bound to one running experiment."""

    def __init__(self, store: Store, row_id: int):
        self._store = store
        self.row_id = row_id
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def write(self, field_name: str, value: Any) -> None:
        if self._closed:
            raise ProtocolError(f"result sink for experiment {self.row_id} is closed")
        self._store.write_result(self.row_id, field_name, value)

    def close(self) -> None:
        self._closed = True


ExperimentFunction = Callable[[Mapping[str, Any], ResultSink], None]


@dataclass
class ExperimentOutcome:
    id: int
    status: Status
    duration: float


@dataclass
class RunReport:
    claimed: int = 0
    succeeded: int = 0
    failed: int = 0
    outcomes: list[ExperimentOutcome] = field(default_factory=list)
    interrupted: bool = False
    # ids whose finalization could not be written; these rows stay RUNNING
    unfinalized: list[int] = field(default_factory=list)

    def summary(self) -> str:
        text = f"claimed {self.claimed}, succeeded {self.succeeded}, failed {self.failed}"
        if self.unfinalized:
            text += f", left RUNNING {len(self.unfinalized)}"
        if self.interrupted:
            text += " (interrupted)"
        return text


def make_worker_id() -> str:
    try:
        host = socket.gethostname() or "unknown-host"
    except OSError:
        host = "unknown-host"
    return f"{host}-{os.getpid()}-{secrets.randbits(32):08x}"


def format_failure(exc: BaseException) -> str:
    if isinstance(exc, ExperimentFailed):
        return f"{exc.message}\n{exc.detail}" if exc.detail else exc.message
    text = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    trace = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
    return f"{text}\n{trace}"


def execute_one(store: Store, claim: ClaimedExperiment, fn: ExperimentFunction) -> Status:
    """Run ``fn`` for a claimed experiment and record DONE or ERROR.

    Failures of ``fn`` never propagate; a StoreError during finalization does.
    """
    sink = ResultSink(store, claim.id)
    try:
        fn(MappingProxyType(dict(claim.key)), sink)
    except Exception as exc:
        sink.close()
        message = format_failure(exc)
        log.info("experiment %d failed: %s", claim.id, message.splitlines()[0] if message else "")
        store.mark_error(claim.id, message or type(exc).__name__)
        return Status.ERROR
    sink.close()
    store.mark_done(claim.id)
    return Status.DONE


def run_worker(
    cfg: StudyConfig,
    fn: ExperimentFunction,
    parallelism: int = 1,
    max_experiments: int | None = None,
    worker_id: str | None = None,
) -> RunReport:
    """Claim and execute experiments until none are left (or the limit is hit).

    Up to ``parallelism`` experiments run at once, each on its own thread and
    store connection, so ``fn`` must tolerate concurrent calls.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if max_experiments is not None and max_experiments < 0:
        raise ValueError("max_experiments must be >= 0")
    worker_id = worker_id or make_worker_id()
    report = RunReport()
    lock = threading.Lock()
    local = threading.local()
    opened: list[Store] = []
    slots = threading.BoundedSemaphore(parallelism)

    def slot_store() -> Store:
        store = getattr(local, "store", None)
        if store is None:
            store = Store.connect(cfg)
            local.store = store
            with lock:
                opened.append(store)
        return store

    def run_slot(claim: ClaimedExperiment) -> None:
        started = time.monotonic()
        status: Status | None = None
        try:
            status = execute_one(slot_store(), claim, fn)
        except Exception as exc:
            log.error("could not finalize experiment %d: %s", claim.id, exc)
        finally:
            elapsed = time.monotonic() - started
            with lock:
                if status is Status.DONE:
                    report.succeeded += 1
                else:
                    report.failed += 1
                if status is None:
                    report.unfinalized.append(claim.id)
                report.outcomes.append(ExperimentOutcome(claim.id, status or Status.RUNNING, elapsed))
            slots.release()

    claimer = Store.connect(cfg)
    error: BaseException | None = None
    try:
        with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="gridq-slot") as pool:
            started = 0
            try:
                while max_experiments is None or started < max_experiments:
                    slots.acquire()
                    try:
                        claim = claimer.claim_next(worker_id)
                    except BaseException:
                        slots.release()
                        raise
                    if claim is None:
                        slots.release()
                        break
                    started += 1
                    with lock:
                        report.claimed += 1
                    pool.submit(run_slot, claim)
            except KeyboardInterrupt:
                report.interrupted = True
                log.warning("interrupted; waiting for running experiments to finish")
            except StoreError as exc:
                error = exc
    finally:
        claimer.close()
        for store in opened:
            store.close()
    report.outcomes.sort(key=lambda o: o.id)
    if error is not None:
        raise error
    return report
