"""Trace ingestion: normalize raw records into one ordered event stream.

Supports replay from JSONL trace files (the desk-scale substrate) and, in
principle, live ring-buffer sources. Replay is fully deterministic: the
same file always yields the same emitted sequence.

Trace file format (UTF-8 JSONL, one record per line):
    first line   {"kind": "trace_header", "version": 1,
                  "wall_clock_anchor_unix_ns": ...}
    other lines  {"ts": u64 ns, "seq": u64, "pid": u32, "tid": u32,
                  "comm": str, "kind": str, "data": {...}}
TLS payloads travel under data.payload_b64 (base64) alongside data.len
and data.truncated. Process start times, when known, travel under
data.proc_start.
"""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

from .events import BoundaryEvent, ProcessIdentity, validate_event

DEFAULT_REORDER_HORIZON_NS = 50_000_000  # 50 ms

TRACE_HEADER_KIND = "trace_header"
TRACE_VERSION = 1


class MalformedLine(Exception):
    """A trace line is not valid JSON or not an object."""

    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(message)
        self.lineno = lineno


class SourceClosed(Exception):
    """The event source has been exhausted or closed."""


# raw_decode skips json.loads()'s per-call wrapper work (whitespace
# regexes, kwarg dispatch); at millions of lines that wrapper dominates.
_raw_decode = json.JSONDecoder().raw_decode


def parse_trace_line(line: str) -> BoundaryEvent:
    """Parse one JSONL record into a validated BoundaryEvent.

    Raises MalformedLine for non-JSON input and SchemaMismatch (via
    validate_event) for schema violations.
    """
    try:
        obj, end = _raw_decode(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedLine(f"not valid JSON: {exc}") from exc
    if end != len(line) and line[end:].strip():
        raise MalformedLine("trailing data after JSON object")
    if not isinstance(obj, dict):
        raise MalformedLine("trace line is not a JSON object")
    return event_from_obj(obj)


# Identity interning: traces contain few distinct processes, so reusing
# one ProcessIdentity per (pid, start) keeps construction and hashing off
# the per-event hot path.
_identity_cache: dict[tuple[int, int], ProcessIdentity] = {}


def _intern_identity(pid: int, start: int) -> ProcessIdentity:
    key = (pid, start)
    proc = _identity_cache.get(key)
    if proc is None:
        proc = _identity_cache[key] = ProcessIdentity(pid, start)
    return proc


def event_from_obj(obj: dict) -> BoundaryEvent:
    from .events import SchemaMismatch

    try:
        data = obj.get("data") or {}
        proc = _intern_identity(obj["pid"], data.get("proc_start", 0))
        ev = BoundaryEvent(
            seq=obj["seq"],
            ts=obj["ts"],
            proc=proc,
            tid=obj.get("tid", obj["pid"]),
            comm=obj.get("comm", ""),
            kind=obj["kind"],
            data=data,
        )
    except KeyError as exc:
        raise SchemaMismatch(f"missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise SchemaMismatch(str(exc)) from exc
    return validate_event(ev)


def event_to_obj(ev: BoundaryEvent) -> dict:
    return {
        "ts": ev.ts,
        "seq": ev.seq,
        "pid": ev.proc.pid,
        "tid": ev.tid,
        "comm": ev.comm,
        "kind": ev.kind,
        "data": ev.data,
    }


def make_header(wall_clock_anchor_unix_ns: int | None = None) -> dict:
    if wall_clock_anchor_unix_ns is None:
        wall_clock_anchor_unix_ns = time.time_ns()
    return {
        "kind": TRACE_HEADER_KIND,
        "version": TRACE_VERSION,
        "wall_clock_anchor_unix_ns": wall_clock_anchor_unix_ns,
    }


def write_trace(path: str, events: Iterable[BoundaryEvent | dict],
                wall_clock_anchor_unix_ns: int = 0) -> int:
    """Write a trace file; returns the number of event lines written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(make_header(wall_clock_anchor_unix_ns)) + "\n")
        for ev in events:
            obj = ev if isinstance(ev, dict) else event_to_obj(ev)
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
            n += 1
    return n


@dataclass
class EventSource:
    """A replayable event source with a bounded reorder stage.

    Events are buffered and released only once the source watermark (the
    maximum timestamp seen) has passed ``ev.ts + reorder_horizon``, which
    repairs the bounded skew between per-CPU ring buffers. An event that
    arrives with a timestamp older than the already-released watermark is
    emitted immediately and flagged ``late=True`` rather than discarded.
    """

    path: str
    reorder_horizon_ns: int = DEFAULT_REORDER_HORIZON_NS
    header: dict | None = None
    _fh: IO[str] | None = field(default=None, repr=False)
    _lineno: int = 0
    _heap: list = field(default_factory=list, repr=False)
    _watermark: int = 0          # max ts seen so far
    _released_ts: int = 0        # ts of the last released event
    _closed: bool = False

    def open(self) -> "EventSource":
        self._fh = open(self.path, "r", encoding="utf-8")
        first = self._fh.readline()
        self._lineno = 1
        if first:
            try:
                obj = json.loads(first)
            except json.JSONDecodeError as exc:
                raise MalformedLine(f"bad header: {exc}", lineno=1) from exc
            if not isinstance(obj, dict) or obj.get("kind") != TRACE_HEADER_KIND:
                raise MalformedLine("first line must be a trace_header record",
                                    lineno=1)
            self.header = obj
        else:
            self.header = None
        return self

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self._closed = True

    def __enter__(self) -> "EventSource":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    def _release(self, ev: BoundaryEvent) -> BoundaryEvent:
        if ev.ts < self._released_ts:
            ev.late = True
        else:
            self._released_ts = ev.ts
        return ev

    def events(self) -> Iterator[BoundaryEvent]:
        """Yield validated events in order_key order within the horizon."""
        if self._fh is None:
            raise SourceClosed("source not open")
        heap = self._heap
        horizon = self.reorder_horizon_ns
        push, pop = heapq.heappush, heapq.heappop
        for line in self._fh:
            self._lineno += 1
            line = line.strip()
            if not line:
                continue
            try:
                ev = parse_trace_line(line)
            except MalformedLine as exc:
                exc.lineno = self._lineno
                raise
            ts = ev.ts
            if ts > self._watermark:
                self._watermark = ts
            if ts < self._released_ts:
                # Already behind the released frontier; reordering cannot
                # help, emit immediately as late evidence.
                ev.late = True
                yield ev
                continue
            push(heap, (ts, ev.seq, ev.proc.pid, ev))
            while heap and heap[0][0] + horizon < self._watermark:
                yield self._release(pop(heap)[3])
        while heap:  # end of replay flushes everything
            yield self._release(pop(heap)[3])
        self._closed = True

    def next_ordered_batch(self, max_events: int | None = None) -> list[BoundaryEvent]:
        """Drain up to ``max_events`` ordered events (all of them by default)."""
        if self._closed:
            raise SourceClosed("source exhausted")
        out = []
        for ev in self.events():
            out.append(ev)
            if max_events is not None and len(out) >= max_events:
                break
        return out


def read_trace(path: str,
               reorder_horizon_ns: int = DEFAULT_REORDER_HORIZON_NS,
               ) -> Iterator[BoundaryEvent]:
    """Convenience wrapper: iterate a trace file's ordered events."""
    with EventSource(path, reorder_horizon_ns) as src:
        yield from src.events()
