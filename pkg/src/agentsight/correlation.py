"""First-stage causal correlation between intents and system actions.

Links each system action to the LLM exchange that plausibly caused it
using three signals: process lineage (the acting process descends from
the process that performed the exchange), temporal proximity (the action
falls inside a window after the response completed), and argument
matching (a token extracted from the response appears in the action's
arguments). Linked items are then compacted into a human-scale trace by
merging runs of homogeneous actions.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .events import ACTION_KINDS, BoundaryEvent, ProcessIdentity, TLS_KINDS
from .lineage import LineageError, LineageTree, UnknownIdentity
from .reassembly import IntentRecord, ReassemblyEngine

DEFAULT_WINDOW_NS = 200_000_000        # 200 ms, within the 100-500 ms bound
MIN_WINDOW_NS = 100_000_000
MAX_WINDOW_NS = 500_000_000
WEAK_HORIZON_NS = 30_000_000_000       # argument-only evidence up to 30 s
MIN_TOKEN_LEN = 4


@dataclass(frozen=True, slots=True)
class ArtifactToken:
    text: str
    cls: str  # path | url | command | hostname | literal
    origin: tuple[int, str]  # (intent id, "response_text" | "tool_call")


@dataclass(slots=True)
class CausalLink:
    intent_id: int
    action_id: int
    lineage: bool
    temporal: bool
    argument: str | None
    score: float


@dataclass(slots=True)
class IntentItem:
    id: int
    record: IntentRecord
    ts: int  # response_end_ts
    artifacts: list[ArtifactToken] = field(default_factory=list)
    root: ProcessIdentity | None = None

    kind = "intent"
    count = 1


@dataclass(slots=True)
class ActionItem:
    id: int
    kind: str
    proc: ProcessIdentity
    comm: str
    first_ts: int
    last_ts: int
    data: dict[str, Any]
    root: ProcessIdentity | None = None
    links: list[CausalLink] = field(default_factory=list)
    count: int = 1
    failed: bool = False
    exit_code: int | None = None
    late: bool = False

    @property
    def ts(self) -> int:
        return self.first_ts


@dataclass(slots=True)
class CausalTrace:
    items: list[IntentItem | ActionItem]
    raw_event_count: int
    merged_item_count: int
    window_ms: int
    diagnostics: list[str] = field(default_factory=list)
    lineage: LineageTree | None = None

    def item_by_id(self, item_id: int) -> IntentItem | ActionItem | None:
        for item in self.items:
            if item.id == item_id:
                return item
        return None


_URL_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9+.-]*://[^\s'\"`<>\])},]+")
_PATH_RE = re.compile(r"(?<![\w/:.-])(/(?:[\w.+-]+/)*[\w.+-]+)")
_BACKTICK_RE = re.compile(r"`([^`\n]+)`")
_HOST_RE = re.compile(r"^[a-zA-Z0-9.-]+")


def _dedup(tokens: Iterable[ArtifactToken]) -> list[ArtifactToken]:
    seen: set[tuple[str, str]] = set()
    out = []
    for tok in tokens:
        key = (tok.cls, tok.text)
        if key not in seen and len(tok.text) >= MIN_TOKEN_LEN:
            seen.add(key)
            out.append(tok)
    return out


def _scan_text(text: str, origin: tuple[int, str]) -> list[ArtifactToken]:
    tokens: list[ArtifactToken] = []
    for m in _URL_RE.finditer(text):
        url = m.group(0).rstrip(".,;:!?")
        tokens.append(ArtifactToken(url, "url", origin))
        rest = url.split("://", 1)[1]
        host = _HOST_RE.match(rest)
        if host:
            tokens.append(ArtifactToken(host.group(0), "hostname", origin))
    stripped = _URL_RE.sub(" ", text)
    for m in _BACKTICK_RE.finditer(stripped):
        cmd = m.group(1).strip()
        tokens.append(ArtifactToken(cmd, "command", origin))
    for m in _PATH_RE.finditer(stripped):
        tokens.append(ArtifactToken(m.group(1), "path", origin))
    return tokens


def extract_artifacts(intent: IntentRecord) -> list[ArtifactToken]:
    """Extract matchable tokens (paths, URLs, commands, hostnames).

    Scans the assembled response text and tool-call arguments,
    deduplicates, and drops tokens shorter than 4 characters.
    """
    tokens = _scan_text(intent.response_text, (intent.id, "response_text"))
    for name, args in intent.tool_calls:
        tokens.extend(_scan_text(args, (intent.id, "tool_call")))
    return _dedup(tokens)


def action_argument_strings(kind: str, data: dict[str, Any]) -> list[str]:
    """The strings an artifact token may match against for one action."""
    args: list[str] = []
    path = data.get("path")
    if path:
        args.append(path)
    filename = data.get("filename")
    if filename:
        args.append(filename)
    argv = data.get("argv")
    if argv:
        args.append(" ".join(argv))
    addr = data.get("addr")
    if addr:
        args.append(addr)
        port = data.get("port")
        if port is not None:
            args.append(f"{addr}:{port}")
    host = data.get("host")
    if host:
        args.append(host)
    return args


def _match_argument(artifacts: list[ArtifactToken],
                    args: list[str]) -> ArtifactToken | None:
    for tok in artifacts:
        text = tok.text
        for arg in args:
            if text in arg:
                return tok
    return None


def score_link(intent: IntentItem, action: ActionItem, tree: LineageTree,
               window_ns: int = DEFAULT_WINDOW_NS) -> CausalLink | None:
    """Evaluate the three causal signals for one intent/action pair.

    Returns a link only when both lineage and temporal hold; the score is
    0.5 base plus 0.5 when an argument token matched.
    """
    dt = action.ts - intent.ts
    temporal = 0 <= dt <= window_ns
    lineage = tree.is_descendant(action.proc, intent.record.proc)
    if not (lineage and temporal):
        return None
    tok = _match_argument(intent.artifacts,
                          action_argument_strings(action.kind, action.data))
    return CausalLink(
        intent_id=intent.id,
        action_id=action.id,
        lineage=True,
        temporal=True,
        argument=tok.text if tok else None,
        score=1.0 if tok else 0.5,
    )


class CorrelationEngine:
    """Streaming correlator: consumes ordered events, builds a CausalTrace."""

    def __init__(self, window_ns: int = DEFAULT_WINDOW_NS,
                 weak_horizon_ns: int = WEAK_HORIZON_NS):
        self.window_ns = window_ns
        self.weak_horizon_ns = weak_horizon_ns
        self.tree = LineageTree()
        self.reassembly = ReassemblyEngine()
        self.items: list[IntentItem | ActionItem] = []
        self.diagnostics: list[str] = []
        self._pending: list[IntentItem] = []  # recent intents, oldest first
        self._last_exec: dict[ProcessIdentity, ActionItem] = {}
        self._next_id = 1
        self._last_ts = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _add_intent(self, record: IntentRecord) -> IntentItem:
        item = IntentItem(id=self._new_id(), record=record,
                          ts=record.response_end_ts)
        record.id = item.id  # item id is the trace-wide intent id
        item.artifacts = extract_artifacts(record)
        try:
            item.root = self.tree.root_of(record.proc)
        except UnknownIdentity:
            item.root = None
        self.items.append(item)
        self._pending.append(item)
        return item

    def _prune_pending(self, now_ts: int) -> None:
        horizon = self.weak_horizon_ns
        while self._pending and now_ts - self._pending[0].ts > horizon:
            self._pending.pop(0)

    def _link(self, action: ActionItem) -> None:
        window = self.window_ns
        for intent in reversed(self._pending):  # most recent first
            dt = action.ts - intent.ts
            if dt < 0:
                continue
            try:
                lineage = self.tree.is_descendant(action.proc, intent.record.proc)
            except UnknownIdentity:
                lineage = False
            if not lineage:
                continue
            if dt <= window:
                link = score_link(intent, action, self.tree, window)
                if link is not None:
                    action.links.append(link)
            else:
                # Beyond the window: retained as weak argument-only
                # evidence for the analyzers, marked temporal=False.
                tok = _match_argument(
                    intent.artifacts,
                    action_argument_strings(action.kind, action.data))
                if tok is not None:
                    action.links.append(CausalLink(
                        intent_id=intent.id, action_id=action.id,
                        lineage=True, temporal=False,
                        argument=tok.text, score=0.5))

    def feed(self, ev: BoundaryEvent) -> None:
        self._last_ts = max(self._last_ts, ev.ts)
        kind = ev.kind
        if kind in TLS_KINDS:
            try:
                payload = base64.b64decode(ev.data.get("payload_b64", ""))
            except (ValueError, TypeError):
                self.diagnostics.append(f"bad base64 payload at ts={ev.ts}")
                return
            self.tree.ensure_known(ev.proc, ev.comm, ev.ts)
            for record in self.reassembly.process_event(ev, payload):
                self._add_intent(record)
            return
        if kind not in ACTION_KINDS:
            self.diagnostics.append(f"unhandled kind {kind} at ts={ev.ts}")
            return

        action = ActionItem(
            id=self._new_id(), kind=kind, proc=ev.proc, comm=ev.comm,
            first_ts=ev.ts, last_ts=ev.ts, data=ev.data, late=ev.late)

        if kind == "proc_fork":
            self.tree.ensure_known(ev.proc, ev.comm, ev.ts)
            try:
                node = self.tree.apply_process_event(ev)
                if node.orphan:
                    self.diagnostics.append(
                        f"orphan fork parent pid={ev.proc.pid} at ts={ev.ts}")
            except LineageError as exc:
                self.diagnostics.append(f"lineage error at ts={ev.ts}: {exc}")
        elif kind == "proc_exec":
            self.tree.apply_process_event(ev)
            self._last_exec[ev.proc] = action
        elif kind == "proc_exit":
            node = self.tree.apply_process_event(ev)
            prior = self._last_exec.get(ev.proc)
            if prior is not None and node.exit_code is not None:
                prior.exit_code = node.exit_code
                if node.exit_code != 0:
                    prior.failed = True
        else:
            self.tree.ensure_known(ev.proc, ev.comm, ev.ts)

        ret = ev.data.get("ret")
        if isinstance(ret, int) and ret < 0:
            action.failed = True
        if kind == "fs_open" and ev.data.get("fd", 0) < 0:
            action.failed = True

        self._prune_pending(ev.ts)
        self._link(action)
        try:
            action.root = self.tree.root_of(ev.proc)
        except UnknownIdentity:
            action.root = None
        self.items.append(action)

    def finish(self) -> CausalTrace:
        for record in self.reassembly.flush(self._last_ts):
            self._add_intent(record)
        return CausalTrace(
            items=self.items,
            raw_event_count=len(self.items),
            merged_item_count=len(self.items),
            window_ms=self.window_ns // 1_000_000,
            diagnostics=self.diagnostics,
            lineage=self.tree,
        )


def correlate_stream(events: Iterable[BoundaryEvent],
                     window_ns: int = DEFAULT_WINDOW_NS,
                     weak_horizon_ns: int = WEAK_HORIZON_NS) -> CausalTrace:
    """Run the streaming correlator over an ordered event stream."""
    engine = CorrelationEngine(window_ns, weak_horizon_ns)
    for ev in events:
        engine.feed(ev)
    return engine.finish()


def merge_key(kind: str, data: dict[str, Any]) -> tuple | None:
    """Compaction key; None means the kind never merges (e.g. exec)."""
    if kind in ("fs_read", "fs_write"):
        return (kind, "fd", data.get("fd"))
    if kind == "fs_open":
        path = data.get("path", "")
        directory = path.rsplit("/", 1)[0] or "/"
        return (kind, "dir", directory)
    if kind == "net_send":
        return (kind, "dst", data.get("addr"), data.get("port"))
    return None


def _merge_links(dst: list[CausalLink], src: list[CausalLink]) -> None:
    by_intent = {l.intent_id: l for l in dst}
    for link in src:
        cur = by_intent.get(link.intent_id)
        if cur is None:
            dst.append(link)
            by_intent[link.intent_id] = link
        elif (link.temporal, link.score) > (cur.temporal, cur.score):
            dst[dst.index(cur)] = link
            by_intent[link.intent_id] = link


def compact_trace(trace: CausalTrace) -> CausalTrace:
    """Collapse consecutive homogeneous actions into counted groups.

    Consecutive action items with identical (process, kind, merge key)
    merge into one group carrying the first item's arguments, a count,
    and the time span. Exec events never merge. Item ids are reassigned
    sequentially and links are rewritten to the new intent ids.
    """
    merged: list[IntentItem | ActionItem] = []
    last_key: tuple | None = None
    for item in trace.items:
        if isinstance(item, IntentItem):
            merged.append(item)
            last_key = None
            continue
        key = merge_key(item.kind, item.data)
        full_key = None if key is None else (item.proc, key)
        if (full_key is not None and full_key == last_key
                and isinstance(merged[-1], ActionItem)):
            group = merged[-1]
            group.count += item.count
            group.last_ts = max(group.last_ts, item.last_ts)
            group.failed = group.failed or item.failed
            _merge_links(group.links, item.links)
        else:
            merged.append(item)
        last_key = full_key

    id_map: dict[int, int] = {}
    for new_id, item in enumerate(merged, start=1):
        id_map[item.id] = new_id
    for item in merged:
        item.id = id_map[item.id]
        if isinstance(item, IntentItem):
            item.record.id = item.id
        else:
            for link in item.links:
                link.intent_id = id_map.get(link.intent_id, link.intent_id)
                link.action_id = item.id

    return CausalTrace(
        items=merged,
        raw_event_count=trace.raw_event_count,
        merged_item_count=len(merged),
        window_ms=trace.window_ms,
        diagnostics=trace.diagnostics,
        lineage=trace.lineage,
    )


def _link_to_obj(link: CausalLink) -> dict:
    return {
        "intent_id": link.intent_id,
        "lineage": link.lineage,
        "temporal": link.temporal,
        "argument": link.argument,
        "score": link.score,
    }


def _lineage_obj(tree: LineageTree | None, proc: ProcessIdentity) -> list[list]:
    if tree is None:
        return []
    try:
        return [[ident.pid, comm] for ident, comm in tree.lineage_path(proc)]
    except UnknownIdentity:
        return []


def item_to_obj(item: IntentItem | ActionItem,
                tree: LineageTree | None = None) -> dict:
    if isinstance(item, IntentItem):
        rec = item.record
        return {
            "id": item.id,
            "type": "intent",
            "first_ts": rec.request_ts,
            "last_ts": rec.response_end_ts,
            "count": 1,
            "links": [],
            "payload": {
                "pid": rec.proc.pid,
                "proc_start": rec.proc.start_ts,
                "comm": rec.comm,
                "endpoint": rec.endpoint,
                "request_messages": [list(m) for m in rec.request_messages],
                "response_text": rec.response_text,
                "tool_calls": [list(t) for t in rec.tool_calls],
                "truncated": rec.truncated,
                "unknown_format": rec.unknown_format,
                "lineage": _lineage_obj(tree, rec.proc),
            },
        }
    return {
        "id": item.id,
        "type": "action_group" if item.count > 1 else "action",
        "kind": item.kind,
        "first_ts": item.first_ts,
        "last_ts": item.last_ts,
        "count": item.count,
        "links": [_link_to_obj(l) for l in item.links],
        "payload": {
            "pid": item.proc.pid,
            "proc_start": item.proc.start_ts,
            "comm": item.comm,
            "data": item.data,
            "failed": item.failed,
            "exit_code": item.exit_code,
            "late": item.late,
            "lineage": _lineage_obj(tree, item.proc),
        },
    }


def trace_to_obj(trace: CausalTrace) -> dict:
    return {
        "header": {
            "raw_event_count": trace.raw_event_count,
            "merged_item_count": trace.merged_item_count,
            "window_ms": trace.window_ms,
        },
        "items": [item_to_obj(i, trace.lineage) for i in trace.items],
        "diagnostics": trace.diagnostics,
    }


def trace_to_json(trace: CausalTrace) -> str:
    return json.dumps(trace_to_obj(trace), sort_keys=True,
                      separators=(",", ":")) + "\n"
