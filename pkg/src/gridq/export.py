"""RFC 4180 rendering of table snapshots.

The stdlib csv writer cannot tell an empty string from an absent value, so
fields are rendered here: absent values become empty fields and empty strings
are written as ``""``.
"""

from __future__ import annotations

from typing import Any, TextIO

from gridq.store import Snapshot

_NEEDS_QUOTES = (",", '"', "\n", "\r")


def format_field(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        text = repr(value)
    else:
        text = str(value)
    if text == "" or any(ch in text for ch in _NEEDS_QUOTES) or text != text.strip():
        return '"' + text.replace('"', '""') + '"'
    return text


def render_csv(snapshot: Snapshot) -> str:
    lines = [",".join(format_field(c) for c in snapshot.columns)]
    lines += [",".join(format_field(v) for v in row) for row in snapshot.rows]
    return "\n".join(lines) + "\n"


def write_csv(snapshot: Snapshot, fp: TextIO) -> None:
    fp.write(render_csv(snapshot))
