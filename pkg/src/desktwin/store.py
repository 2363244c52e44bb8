"""Durable session records: append-only JSON-lines with crash recovery.

Layout: one header line, one line per 50Hz tick, one footer line written at
finalization. Every line is flushed as written, so a crash leaves a valid
header plus a prefix of ticks; a missing footer marks the file incomplete
but fully recoverable. Timestamps are derived from the integer tick index,
making grid validation exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ModelFormatError, SessionFormatError

SESSION_FILE_VERSION = 1
SESSION_RATE_HZ = 50.0

STATUSES = ("saved", "discarded", "aborted")

_HEADER_FIELDS = {"type", "version", "meta", "rate_hz", "streams", "session"}
_META_FIELDS = {"operator", "started_at", "robot_id", "task"}
_TICK_FIELDS = {"type", "tick_index", "t", "leader_q", "follower_q", "follower_qd",
                "q_target", "gripper", "latency_ms"}
_FOOTER_FIELDS = {"type", "status", "tick_count", "gap_events", "reason"}


@dataclass
class SessionMeta:
    operator: str
    started_at: str   # UTC ISO-8601
    robot_id: str
    task: str | None = None

    def __post_init__(self):
        if not self.operator or not self.robot_id:
            raise ModelFormatError("operator and robot_id must be nonempty")

    def to_dict(self) -> dict:
        return {"operator": self.operator, "started_at": self.started_at,
                "robot_id": self.robot_id, "task": self.task}


@dataclass
class StreamSpec:
    name: str
    kind: str
    dims: int

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "dims": self.dims}


@dataclass
class TickEntry:
    tick_index: int
    t: float
    leader_q: list[float]
    follower_q: list[float]
    follower_qd: list[float]
    q_target: list[float]
    gripper: float
    latency_ms: float | None

    def to_dict(self) -> dict:
        return {"type": "tick", "tick_index": self.tick_index, "t": self.t,
                "leader_q": self.leader_q, "follower_q": self.follower_q,
                "follower_qd": self.follower_qd, "q_target": self.q_target,
                "gripper": self.gripper, "latency_ms": self.latency_ms}


@dataclass
class GapEvent:
    stream: str
    at_tick: int
    gap_s: float

    def to_dict(self) -> dict:
        return {"stream": self.stream, "at_tick": self.at_tick, "gap_s": self.gap_s}


@dataclass
class Footer:
    status: str
    tick_count: int
    gap_events: list[GapEvent] = field(default_factory=list)
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"type": "footer", "status": self.status, "tick_count": self.tick_count,
                "gap_events": [g.to_dict() for g in self.gap_events],
                "reason": self.reason}


def default_streams(n_joints: int) -> list[StreamSpec]:
    return [StreamSpec("leader_q", "joint", n_joints),
            StreamSpec("follower_q", "joint", n_joints),
            StreamSpec("follower_qd", "joint", n_joints),
            StreamSpec("q_target", "joint", n_joints),
            StreamSpec("gripper", "linear", 1),
            StreamSpec("latency_ms", "scalar", 1)]


@dataclass
class SessionRecord:
    meta: SessionMeta
    rate_hz: float
    streams: list[StreamSpec]
    ticks: list[TickEntry]
    footer: Footer
    gap_threshold: float = 0.1
    close_threshold: float = 0.8


@dataclass
class IncompleteRecord:
    """A crash-recovered session: header and tick prefix, no footer."""

    meta: SessionMeta
    rate_hz: float
    streams: list[StreamSpec]
    ticks: list[TickEntry]
    gap_threshold: float = 0.1
    close_threshold: float = 0.8


def session_filename(meta: SessionMeta) -> str:
    stamp = meta.started_at.replace(":", "").replace("+0000", "Z")
    return f"{stamp}-{meta.operator}.session.jsonl"


def session_path(root, meta: SessionMeta) -> Path:
    """{root}/{robot_id}/{started_at}-{operator}.session.jsonl"""
    return Path(root) / meta.robot_id / session_filename(meta)


class SessionWriter:
    """Single-owner append-only writer; header immediately, footer exactly once."""

    def __init__(self, path, meta: SessionMeta, streams: list[StreamSpec],
                 rate_hz: float = SESSION_RATE_HZ,
                 gap_threshold: float = 0.1, close_threshold: float = 0.8):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.meta = meta
        self.streams = streams
        self.rate_hz = rate_hz
        self.gap_threshold = gap_threshold
        self.close_threshold = close_threshold
        self._n_ticks = 0
        self._finalized = False
        self._f = open(self.path, "w", encoding="utf-8")
        header = {"type": "header", "version": SESSION_FILE_VERSION,
                  "meta": meta.to_dict(), "rate_hz": rate_hz,
                  "streams": [s.to_dict() for s in streams],
                  "session": {"close_threshold": close_threshold,
                              "gap_threshold": gap_threshold}}
        self._write_line(header)

    def _write_line(self, obj: dict) -> None:
        self._f.write(json.dumps(obj) + "\n")
        self._f.flush()

    def append_tick(self, tick: TickEntry) -> None:
        if self._finalized:
            raise SessionFormatError("writer already finalized")
        if tick.tick_index != self._n_ticks:
            raise SessionFormatError(
                f"tick_index {tick.tick_index} breaks contiguity at {self._n_ticks}")
        self._write_line(tick.to_dict())
        self._n_ticks += 1

    def finalize(self, status: str, gap_events: list[GapEvent] = (),
                 reason: str | None = None) -> Footer:
        if self._finalized:
            raise SessionFormatError("writer already finalized")
        if status not in STATUSES:
            raise SessionFormatError(f"unknown status {status!r}")
        footer = Footer(status=status, tick_count=self._n_ticks,
                        gap_events=list(gap_events), reason=reason)
        self._write_line(footer.to_dict())
        self._finalized = True
        self._f.close()
        return footer

    def abort_on_error(self, reason: str) -> None:
        if not self._finalized:
            try:
                self.finalize("aborted", reason=reason)
            except OSError:
                self._finalized = True
                self._f.close()

    @property
    def tick_count(self) -> int:
        return self._n_ticks


def write_session(record: SessionRecord, path) -> None:
    """Write a complete in-memory record (header, ticks, footer)."""
    w = SessionWriter(path, record.meta, record.streams, record.rate_hz,
                      record.gap_threshold, record.close_threshold)
    for tick in record.ticks:
        w.append_tick(tick)
    w.finalize(record.footer.status, record.footer.gap_events, record.footer.reason)


def _parse_meta(d: dict, line: int) -> SessionMeta:
    if not isinstance(d, dict) or set(d) != _META_FIELDS:
        raise SessionFormatError(f"header meta must have fields {sorted(_META_FIELDS)}",
                                 line)
    try:
        return SessionMeta(**d)
    except ModelFormatError as e:
        raise SessionFormatError(str(e), line) from e


def read_session(path) -> SessionRecord | IncompleteRecord:
    """Strict parse. Missing footer yields IncompleteRecord with all ticks."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise SessionFormatError("empty session file", 1)

    def parse(ln: int, raw: str) -> dict:
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise SessionFormatError(f"invalid JSON ({e.msg})", ln) from e
        if not isinstance(obj, dict) or "type" not in obj:
            raise SessionFormatError("expected a JSON object with a 'type' field", ln)
        return obj

    header = parse(1, lines[0])
    if header.get("type") != "header":
        raise SessionFormatError("first line must be the header", 1)
    if set(header) != _HEADER_FIELDS:
        raise SessionFormatError(f"header must have fields {sorted(_HEADER_FIELDS)}", 1)
    if header.get("version") != SESSION_FILE_VERSION:
        raise SessionFormatError(f"unsupported version {header.get('version')!r}", 1)
    meta = _parse_meta(header["meta"], 1)
    try:
        streams = [StreamSpec(**s) for s in header["streams"]]
        rate_hz = float(header["rate_hz"])
        sess = header["session"]
        gap_threshold = float(sess["gap_threshold"])
        close_threshold = float(sess["close_threshold"])
    except (TypeError, KeyError, ValueError) as e:
        raise SessionFormatError(f"malformed header: {e}", 1) from e

    ticks: list[TickEntry] = []
    footer: Footer | None = None
    for ln, raw in enumerate(lines[1:], start=2):
        obj = parse(ln, raw)
        kind = obj["type"]
        if footer is not None:
            raise SessionFormatError("content after footer", ln)
        if kind == "tick":
            if set(obj) != _TICK_FIELDS:
                raise SessionFormatError(
                    f"tick must have fields {sorted(_TICK_FIELDS)}", ln)
            entry = TickEntry(tick_index=obj["tick_index"], t=obj["t"],
                              leader_q=obj["leader_q"], follower_q=obj["follower_q"],
                              follower_qd=obj["follower_qd"], q_target=obj["q_target"],
                              gripper=obj["gripper"], latency_ms=obj["latency_ms"])
            if entry.tick_index != len(ticks):
                raise SessionFormatError(
                    f"non-contiguous tick_index {entry.tick_index}, "
                    f"expected {len(ticks)}", ln)
            ticks.append(entry)
        elif kind == "footer":
            if set(obj) != _FOOTER_FIELDS:
                raise SessionFormatError(
                    f"footer must have fields {sorted(_FOOTER_FIELDS)}", ln)
            try:
                gaps = [GapEvent(**g) for g in obj["gap_events"]]
            except TypeError as e:
                raise SessionFormatError(f"malformed gap_events: {e}", ln) from e
            footer = Footer(status=obj["status"], tick_count=obj["tick_count"],
                            gap_events=gaps, reason=obj["reason"])
        else:
            raise SessionFormatError(f"unknown line type {kind!r}", ln)
    if footer is None:
        return IncompleteRecord(meta=meta, rate_hz=rate_hz, streams=streams,
                                ticks=ticks, gap_threshold=gap_threshold,
                                close_threshold=close_threshold)
    return SessionRecord(meta=meta, rate_hz=rate_hz, streams=streams, ticks=ticks,
                         footer=footer, gap_threshold=gap_threshold,
                         close_threshold=close_threshold)


@dataclass
class ValidationReport:
    passed: bool
    violations: list[str]
    tick_count: int
    status: str | None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violations": self.violations,
                "tick_count": self.tick_count, "status": self.status}


def validate(record: SessionRecord | IncompleteRecord) -> ValidationReport:
    """Completeness checks: contiguity, exact time grid, dimensions, footer."""
    v: list[str] = []
    incomplete = isinstance(record, IncompleteRecord)
    if incomplete:
        v.append("missing footer: incomplete (crash-recovered) session")
    if record.rate_hz != SESSION_RATE_HZ:
        v.append(f"rate_hz {record.rate_hz} != {SESSION_RATE_HZ}")
    dims = {s.name: s.dims for s in record.streams}
    for want in ("leader_q", "follower_q", "follower_qd", "q_target"):
        if want not in dims:
            v.append(f"stream {want} not declared")
    for i, tick in enumerate(record.ticks):
        prefix = f"tick {tick.tick_index}"
        if tick.tick_index != i:
            v.append(f"contiguity violation at index {i}: found tick {tick.tick_index}")
            break
        if record.rate_hz > 0 and tick.t != tick.tick_index / record.rate_hz:
            v.append(f"{prefix}: t={tick.t!r} off the exact grid")
        for name in ("leader_q", "follower_q", "follower_qd", "q_target"):
            val = getattr(tick, name)
            if name in dims and len(val) != dims[name]:
                v.append(f"{prefix}: {name} has {len(val)} entries, "
                         f"declared {dims[name]}")
            if not all(isinstance(x, (int, float)) and math.isfinite(x) for x in val):
                v.append(f"{prefix}: {name} has non-finite entries")
        if tick.latency_ms is not None and (
                not isinstance(tick.latency_ms, (int, float)) or tick.latency_ms < 0):
            v.append(f"{prefix}: latency_ms must be null or >= 0")
    status = None
    if not incomplete:
        footer = record.footer
        status = footer.status
        if footer.status not in STATUSES:
            v.append(f"unknown status {footer.status!r}")
        if footer.tick_count != len(record.ticks):
            v.append(f"footer tick_count {footer.tick_count} != "
                     f"{len(record.ticks)} ticks present")
        exceeded = [g for g in footer.gap_events if g.gap_s > record.gap_threshold]
        if footer.status == "aborted" and not exceeded:
            v.append("status aborted but no gap event exceeds the threshold")
        if footer.status != "aborted" and exceeded:
            v.append(f"status {footer.status} but gap event exceeds threshold")
        for g in footer.gap_events:
            if not 0 <= g.at_tick <= len(record.ticks):
                v.append(f"gap event at_tick {g.at_tick} out of range")
    return ValidationReport(passed=not v, violations=v,
                            tick_count=len(record.ticks), status=status)
