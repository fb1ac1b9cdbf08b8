"""Textual serializations of a sanitized capture: TEXT, DICT and PCT-DICT.

All three lowercase their output (the literal ``[REDACTED]`` placeholder is
kept intact) and tag every line with the frame it came from.
"""

from __future__ import annotations

import enum
import fnmatch
from dataclasses import dataclass
from pathlib import Path

from .capture import CaptureFile
from .sanitize import REDACTED

SERIALIZED_MAGIC = "#capmlm-serialized"


class ReprKind(str, enum.Enum):
    TEXT = "text"
    DICT = "dict"
    PCT_DICT = "pct-dict"

    @classmethod
    def parse(cls, value) -> "ReprKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == v:
                return kind
        raise ValueError(f"unknown representation {value!r}; expected text, dict or pct-dict")


DEFAULT_ALLOWLIST = (
    "frame.protocols",
    "frame.time_delta",
    "*.request-line.*",
    "*.method*",
    "*status*",
    "*.cseq.*",
    "*reason*",
    "*warning*",
    "*cause*",
    "*message-type*",
    "*message_type*",
    "*msg_type*",
    "*procedurecode*",
    "*.cmd.code",
    "*.content-type.*",
)


@dataclass(frozen=True)
class FieldAllowlist:
    entries: tuple[str, ...] = ()

    @classmethod
    def default(cls) -> "FieldAllowlist":
        return cls(DEFAULT_ALLOWLIST)

    @classmethod
    def allow_all(cls) -> "FieldAllowlist":
        return cls(())

    def allows(self, name: str) -> bool:
        if not self.entries:
            return True
        n = name.lower()
        return any(fnmatch.fnmatchcase(n, g.lower()) for g in self.entries)


@dataclass(frozen=True)
class SerializedCapture:
    capture_id: str
    kind: ReprKind
    lines: tuple[tuple[int, str], ...]

    @property
    def frames(self) -> set[int]:
        return {f for f, _ in self.lines}


def _clean(text: str) -> str:
    text = " ".join(text.split())
    if REDACTED not in text:
        return text.lower()
    return REDACTED.join(part.lower() for part in text.split(REDACTED))


def render_field(name: str, value: str) -> str:
    if name == value:
        return _clean(value)
    return _clean(f"{name}: {value}")


def build_text(capture: CaptureFile) -> SerializedCapture:
    lines = tuple(
        (p.frame_no, render_field(f.name, f.value))
        for p in sorted(capture.packets, key=lambda p: p.frame_no)
        for f in p.fields
    )
    return SerializedCapture(capture.capture_id, ReprKind.TEXT, lines)


def build_dict(capture: CaptureFile, allow: FieldAllowlist | None = None) -> SerializedCapture:
    """Column-major key/value serialization of the allowed-field table."""
    allow = FieldAllowlist.default() if allow is None else allow
    columns: dict[str, list[tuple[int, str]]] = {}
    for p in sorted(capture.packets, key=lambda p: p.frame_no):
        for f in p.fields:
            if allow.allows(f.name):
                columns.setdefault(f.name, []).append((p.frame_no, render_field(f.name, f.value)))
    lines = tuple(cell for cells in columns.values() for cell in cells)
    return SerializedCapture(capture.capture_id, ReprKind.DICT, lines)


def frame_marker(frame_no: int) -> str:
    return f"## frame {frame_no}"


def build_pct_dict(capture: CaptureFile, allow: FieldAllowlist | None = None) -> SerializedCapture:
    """Packet-major key/value serialization, each packet opened by ``## frame N``."""
    allow = FieldAllowlist.default() if allow is None else allow
    lines: list[tuple[int, str]] = []
    for p in sorted(capture.packets, key=lambda p: p.frame_no):
        lines.append((p.frame_no, frame_marker(p.frame_no)))
        lines.extend(
            (p.frame_no, render_field(f.name, f.value)) for f in p.fields if allow.allows(f.name)
        )
    return SerializedCapture(capture.capture_id, ReprKind.PCT_DICT, tuple(lines))


def serialize(capture: CaptureFile, kind, allow: FieldAllowlist | None = None) -> SerializedCapture:
    kind = ReprKind.parse(kind)
    if kind is ReprKind.TEXT:
        return build_text(capture)
    if kind is ReprKind.DICT:
        return build_dict(capture, allow)
    return build_pct_dict(capture, allow)


def is_marker(text: str) -> bool:
    return text.startswith("## frame ")


def dumps(sc: SerializedCapture, config_hash: str = "") -> str:
    out = [f"{SERIALIZED_MAGIC}\t{sc.capture_id}\t{sc.kind.value}\t{config_hash}"]
    out.extend(f"{frame}\t{text}" for frame, text in sc.lines)
    return "\n".join(out) + "\n"


def loads(data: str) -> tuple[SerializedCapture, str]:
    rows = data.split("\n")
    head = rows[0].split("\t")
    if head[0] != SERIALIZED_MAGIC or len(head) < 3:
        raise ValueError("not a serialized capture file")
    config_hash = head[3] if len(head) > 3 else ""
    lines = []
    for row in rows[1:]:
        if not row:
            continue
        frame, _, text = row.partition("\t")
        lines.append((int(frame), text))
    return SerializedCapture(head[1], ReprKind.parse(head[2]), tuple(lines)), config_hash


def save(sc: SerializedCapture, path, config_hash: str = "") -> None:
    Path(path).write_text(dumps(sc, config_hash), encoding="utf-8")


def load(path) -> tuple[SerializedCapture, str]:
    return loads(Path(path).read_text(encoding="utf-8"))
