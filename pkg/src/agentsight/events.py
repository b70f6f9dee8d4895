"""Canonical event vocabulary shared by every source and pipeline stage.

Every record crossing a monitored system boundary (TLS payload chunk,
process lifecycle event, syscall) is normalized into a BoundaryEvent.
Events are immutable once constructed and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

# Payload capture is truncated at 16 KiB per chunk; reassembly tolerates
# truncation by flagging, not failing.
MAX_PAYLOAD = 16 * 1024

TLS_KINDS = ("tls_read", "tls_write")
PROC_KINDS = ("proc_fork", "proc_exec", "proc_exit")
FS_KINDS = ("fs_open", "fs_write", "fs_read")
NET_KINDS = ("net_connect", "net_send")

ALL_KINDS = frozenset(TLS_KINDS + PROC_KINDS + FS_KINDS + NET_KINDS)

# Kinds that appear as action items in a causal trace (everything that is
# not raw TLS traffic, which reassembly consumes).
ACTION_KINDS = frozenset(PROC_KINDS + FS_KINDS + NET_KINDS)


class EventError(Exception):
    """Base class for event validation failures."""


class SchemaMismatch(EventError):
    """Payload fields absent or wrongly typed for the event kind."""


class IdentityInvalid(EventError):
    """Process identity violates its invariants (pid <= 0)."""


@dataclass(frozen=True, slots=True)
class ProcessIdentity:
    """A process, disambiguated against PID reuse by its start time."""

    pid: int
    start_ts: int = 0

    def __post_init__(self) -> None:
        if self.pid <= 0:
            raise IdentityInvalid(f"pid must be positive, got {self.pid}")


@dataclass(slots=True)
class BoundaryEvent:
    """One timestamped record crossing a system boundary."""

    seq: int
    ts: int  # monotonic nanoseconds, never wall clock
    proc: ProcessIdentity
    tid: int
    comm: str
    kind: str
    data: dict[str, Any] = field(default_factory=dict)
    late: bool = False  # set by ingestion when released behind the watermark

    @property
    def pid(self) -> int:
        return self.proc.pid


# Required payload fields per kind: name -> acceptable types.
_SCHEMAS: dict[str, dict[str, type | tuple[type, ...]]] = {
    "tls_read": {"payload_b64": str, "len": int, "truncated": bool, "fd": int},
    "tls_write": {"payload_b64": str, "len": int, "truncated": bool, "fd": int},
    "proc_fork": {"child_pid": int},
    "proc_exec": {"filename": str, "argv": list},
    "proc_exit": {},
    "fs_open": {"path": str, "fd": int},
    "fs_write": {"fd": int, "len": int},
    "fs_read": {"fd": int, "len": int},
    "net_connect": {"addr": str, "port": int},
    "net_send": {"addr": str, "port": int, "len": int},
}

# Flattened view iterated on the hot ingestion path.
_SCHEMA_ITEMS: dict[str, tuple] = {k: tuple(v.items())
                                   for k, v in _SCHEMAS.items()}


def validate_event(ev: BoundaryEvent) -> BoundaryEvent:
    """Accept ``ev`` iff its kind/payload schema match and identity is sane.

    Raises the first violated rule: IdentityInvalid for a bad pid,
    SchemaMismatch for anything wrong with kind or payload. Returns the
    event unchanged on success so calls compose.
    """
    if ev.proc.pid <= 0:
        raise IdentityInvalid(f"pid must be positive, got {ev.proc.pid}")
    if ev.ts <= 0:
        raise SchemaMismatch(f"ts must be positive, got {ev.ts}")
    schema = _SCHEMA_ITEMS.get(ev.kind)
    if schema is None:
        raise SchemaMismatch(f"unknown event kind {ev.kind!r}")
    if not isinstance(ev.data, dict):
        raise SchemaMismatch(f"{ev.kind}: data must be an object")
    data = ev.data
    for name, typ in schema:
        if name not in data:
            raise SchemaMismatch(f"{ev.kind}: missing payload field {name!r}")
        value = data[name]
        if typ is int:
            # bool is an int subclass; reject it for integer fields
            if isinstance(value, bool) or not isinstance(value, int):
                raise SchemaMismatch(f"{ev.kind}: field {name!r} must be an integer")
        elif not isinstance(value, typ):
            raise SchemaMismatch(
                f"{ev.kind}: field {name!r} must be {getattr(typ, '__name__', typ)}"
            )
    return ev


def order_key(ev: BoundaryEvent) -> tuple[int, int, int]:
    """Totally ordered key: (ts, seq, pid). Deterministic for any multiset."""
    return (ev.ts, ev.seq, ev.proc.pid)
