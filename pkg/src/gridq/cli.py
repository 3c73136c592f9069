"""``gridq`` command line: init, run, status, reset and export a study.

Exit codes: 0 success, 1 finished with failed experiments, 2 usage or config
error, 3 backend error, 4 file I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from gridq.config import ConfigError, StudyConfig, coerce_value, load_config
from gridq.executor import ExperimentFailed, ResultSink, run_worker
from gridq.export import render_csv
from gridq.grid import expand_grid
from gridq.store import Status, Store, StoreError

log = logging.getLogger("gridq")

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_IO = 4

INPUT_ENV = "GRIDQ_INPUT"
OUTPUT_ENV = "GRIDQ_OUTPUT"


class CLIError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class CommandExperiment:
    """Runs one experiment as a shell command exchanging JSON files.

    The child gets two environment variables: GRIDQ_INPUT points at a JSON
    object of key values, GRIDQ_OUTPUT at a file it may fill with a JSON
    object of result values. The command string is trusted input.
    """

    def __init__(self, cfg: StudyConfig, command: str, keep_temp: bool = False):
        self.cfg = cfg
        self.command = command
        self.keep_temp = keep_temp

    def __call__(self, key: Mapping[str, Any], sink: ResultSink) -> None:
        workdir = Path(tempfile.mkdtemp(prefix=f"gridq-{sink.row_id}-"))
        try:
            input_path = workdir / "input.json"
            output_path = workdir / "output.json"
            input_path.write_text(json.dumps(dict(key)), encoding="utf-8")
            output_path.touch()
            env = dict(os.environ)
            env[INPUT_ENV] = str(input_path.resolve())
            env[OUTPUT_ENV] = str(output_path.resolve())
            proc = subprocess.run(
                self.command, shell=True, env=env, capture_output=True, stdin=subprocess.DEVNULL
            )
            stderr = proc.stderr.decode("utf-8", "replace")
            if proc.stdout:
                log.debug("experiment %d stdout: %s", sink.row_id, proc.stdout.decode("utf-8", "replace"))
            if proc.returncode != 0:
                if proc.returncode < 0:
                    what = f"command killed by signal {-proc.returncode}"
                else:
                    what = f"command exited with status {proc.returncode}"
                raise ExperimentFailed(what, stderr)
            for name, value in self._read_output(output_path, stderr):
                sink.write(name, value)
        finally:
            if self.keep_temp:
                log.warning("kept temp files for experiment %d in %s", sink.row_id, workdir)
            else:
                shutil.rmtree(workdir, ignore_errors=True)

    def _read_output(self, path: Path, stderr: str) -> list[tuple[str, Any]]:
        text = path.read_text(encoding="utf-8", errors="replace")
        if not text.strip():
            return []
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ExperimentFailed(f"could not parse {OUTPUT_ENV} as JSON: {exc}", stderr) from None
        if not isinstance(data, dict):
            raise ExperimentFailed(f"{OUTPUT_ENV} must hold a JSON object, got {type(data).__name__}", stderr)
        values = []
        # validate everything before the first write so bad output leaves no partial results
        for name, value in data.items():
            rf = self.cfg.result_field(name)
            if rf is None:
                raise ExperimentFailed(f"unknown result field {name!r} in {OUTPUT_ENV}", stderr)
            try:
                values.append((name, coerce_value(rf.type, value)))
            except TypeError as exc:
                raise ExperimentFailed(f"result field {name!r}: {exc}", stderr) from None
        return values


def parse_statuses(text: str) -> set[Status]:
    tokens = [t.strip() for t in text.split(",")]
    if not any(tokens):
        raise CLIError("no status given", EXIT_USAGE)
    out = set()
    for token in tokens:
        try:
            out.add(Status(token.upper()))
        except ValueError:
            raise CLIError(
                f"unknown status {token!r} (expected created, running, done or error)", EXIT_USAGE
            ) from None
    return out


def _load(path: str) -> StudyConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CLIError(f"{path}: {exc}", EXIT_USAGE) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CLIError(f"cannot read config: {exc}", EXIT_USAGE) from None


def _open_existing(cfg: StudyConfig) -> Store:
    store = Store.connect(cfg)
    if not store.table_exists():
        store.close()
        raise CLIError(f"table {cfg.table_name!r} does not exist (run 'gridq init' first)", EXIT_BACKEND)
    return store


def cmd_init(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    with Store.connect(cfg, create=True) as store:
        store.create_table()
        inserted = store.fill_table(expand_grid(cfg.key_fields))
    print(f"created table {cfg.table_name}, inserted {inserted} experiments")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    if not args.command:
        raise CLIError("run needs --command", EXIT_USAGE)
    if args.parallelism < 1:
        raise CLIError("--parallelism must be >= 1", EXIT_USAGE)
    if args.max is not None and args.max < 0:
        raise CLIError("--max must be >= 0", EXIT_USAGE)
    cfg = _load(args.config)
    _open_existing(cfg).close()
    fn = CommandExperiment(cfg, args.command, keep_temp=args.keep_temp)
    report = run_worker(cfg, fn, parallelism=args.parallelism, max_experiments=args.max)
    print(report.summary())
    return EXIT_OK if report.failed == 0 and not report.interrupted else EXIT_FAILURES


def cmd_status(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    with _open_existing(cfg) as store:
        counts = store.status_counts()
    for status in Status:
        print(f"{status.value}\t{counts[status]}")
    return EXIT_OK


def cmd_reset(args: argparse.Namespace) -> int:
    if not args.status:
        raise CLIError("reset needs --status", EXIT_USAGE)
    statuses = parse_statuses(args.status)
    cfg = _load(args.config)
    with _open_existing(cfg) as store:
        n = store.reset(statuses)
    print(f"reset {n} experiments")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    if not args.out:
        raise CLIError("export needs --out", EXIT_USAGE)
    statuses = parse_statuses(args.status) if args.status else None
    cfg = _load(args.config)
    with _open_existing(cfg) as store:
        snapshot = store.export(statuses)
    try:
        with open(args.out, "w", encoding="utf-8", newline="") as fp:
            fp.write(render_csv(snapshot))
    except OSError as exc:
        raise CLIError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    print(f"exported {len(snapshot)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "run": cmd_run,
    "status": cmd_status,
    "reset": cmd_reset,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridq", description="Database-backed experiment grid runner.")
    parser.add_argument("command_name", choices=sorted(COMMANDS), metavar="{init,run,status,reset,export}")
    parser.add_argument("--config", required=True, help="study file")
    parser.add_argument("--command", help="shell command run once per experiment (run)")
    parser.add_argument("--parallelism", type=int, default=1, help="concurrent experiments (run)")
    parser.add_argument("--max", type=int, default=None, help="stop after starting N experiments (run)")
    parser.add_argument("--status", help="comma-separated statuses (reset, export)")
    parser.add_argument("--out", help="CSV output path (export)")
    parser.add_argument("--keep-temp", action="store_true", help="keep per-experiment JSON files (run)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command_name](args)
    except CLIError as exc:
        print(f"gridq: {exc}", file=sys.stderr)
        return exc.exit_code
    except StoreError as exc:
        print(f"gridq: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
