"""Stateful reassembly of intercepted TLS chunks into LLM exchanges.

TLS probe events deliver plaintext in arbitrary fragments. Per (process,
fd) flow this module reassembles HTTP/1.1 framing (content-length and
chunked bodies) and streaming responses (Server-Sent Events), then lifts
completed request/response pairs into IntentRecords carrying the LLM
request messages, the fully assembled response text, and any tool calls.

The parsers are strictly incremental: feeding the same byte stream in any
fragmentation yields the same completed units.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable

from .events import BoundaryEvent, ProcessIdentity

SSE_DONE = "[DONE]"

AWAITING_HEADERS = "awaiting-headers"
IN_BODY = "in-body"
IN_SSE = "in-sse"
OPAQUE = "opaque"


class FramingViolation(Exception):
    """Bytes cannot extend any legal HTTP state; flow goes opaque."""


@dataclass(slots=True)
class SseEvent:
    data: str


class SseParser:
    """Incremental SSE parser.

    Splits on blank-line event boundaries, joins multiple ``data:`` lines
    within one event with a newline, skips junk lines, and treats the
    sentinel payload ``[DONE]`` as end of stream.
    """

    def __init__(self) -> None:
        self._buf = b""
        self._data_lines: list[str] = []
        self.done = False

    def feed(self, data: bytes) -> list[str]:
        if self.done:
            return []
        self._buf += data
        out: list[str] = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = self._buf[:nl]
            self._buf = self._buf[nl + 1:]
            if line.endswith(b"\r"):
                line = line[:-1]
            if line == b"":
                if self._data_lines:
                    payload = "\n".join(self._data_lines)
                    self._data_lines = []
                    if payload == SSE_DONE:
                        self.done = True
                        break
                    out.append(payload)
                continue
            if line.startswith(b"data:"):
                value = line[5:]
                if value.startswith(b" "):
                    value = value[1:]
                self._data_lines.append(value.decode("utf-8", "replace"))
            # event:/id:/retry:/comment lines carry no payload here
        return out

    def flush(self) -> list[str]:
        """Complete a stream cut off without a final blank line."""
        out = self.feed(b"\n\n")
        self._buf = b""
        return out


def parse_sse(data: bytes, parser: SseParser | None = None) -> list[str]:
    """One-shot or incremental SSE parse; returns data payloads in order."""
    p = parser or SseParser()
    return p.feed(data)


@dataclass(slots=True)
class HttpUnit:
    """One completed HTTP message (request or response)."""

    role: str  # "request" | "response"
    start_line: str
    headers: dict[str, str]
    body: bytes
    sse_payloads: list[str]
    is_sse: bool
    start_ts: int
    end_ts: int
    truncated: bool

    @property
    def method(self) -> str:
        return self.start_line.split(" ", 1)[0]

    @property
    def target(self) -> str:
        parts = self.start_line.split(" ")
        return parts[1] if len(parts) > 1 else ""

    @property
    def status(self) -> int:
        parts = self.start_line.split(" ")
        try:
            return int(parts[1])
        except (IndexError, ValueError):
            return 0


class _HttpParser:
    """Incremental one-direction HTTP/1.1 message parser."""

    def __init__(self, role: str):
        self.role = role
        self.state = AWAITING_HEADERS
        self._buf = b""
        self._headers: dict[str, str] = {}
        self._start_line = ""
        self._body = bytearray()
        self._body_remaining = 0
        self._chunked = False
        self._chunk_remaining = -1  # -1: expecting a size line
        self._until_close = False
        self._sse: SseParser | None = None
        self._sse_payloads: list[str] = []
        self._start_ts = 0
        self._last_ts = 0
        self._truncated = False
        self.opaque_bytes = 0

    def _reset_message(self) -> None:
        self._headers = {}
        self._start_line = ""
        self._body = bytearray()
        self._body_remaining = 0
        self._chunked = False
        self._chunk_remaining = -1
        self._until_close = False
        self._sse = None
        self._sse_payloads = []
        self._start_ts = 0
        self._truncated = False
        self.state = AWAITING_HEADERS

    def _complete(self) -> HttpUnit:
        unit = HttpUnit(
            role=self.role,
            start_line=self._start_line,
            headers=self._headers,
            body=bytes(self._body),
            sse_payloads=self._sse_payloads,
            is_sse=self._sse is not None,
            start_ts=self._start_ts,
            end_ts=self._last_ts,
            truncated=self._truncated,
        )
        self._reset_message()
        return unit

    def _parse_head(self, head: bytes) -> None:
        lines = head.decode("latin-1").split("\r\n")
        start = lines[0]
        if self.role == "request":
            parts = start.split(" ")
            if len(parts) != 3 or not parts[2].startswith("HTTP/"):
                raise FramingViolation(f"bad request line: {start!r}")
        else:
            if not start.startswith("HTTP/"):
                raise FramingViolation(f"bad status line: {start!r}")
        self._start_line = start
        for line in lines[1:]:
            if not line:
                continue
            if ":" not in line:
                raise FramingViolation(f"bad header line: {line!r}")
            name, _, value = line.partition(":")
            self._headers[name.strip().lower()] = value.strip()

        te = self._headers.get("transfer-encoding", "")
        self._chunked = "chunked" in te.lower()
        ctype = self._headers.get("content-type", "")
        if self.role == "response" and "text/event-stream" in ctype:
            self._sse = SseParser()
            self.state = IN_SSE
            return
        if self._chunked:
            self.state = IN_BODY
            self._chunk_remaining = -1
            return
        cl = self._headers.get("content-length")
        if cl is not None:
            try:
                self._body_remaining = int(cl)
            except ValueError:
                raise FramingViolation(f"bad content-length: {cl!r}")
            self.state = IN_BODY
        elif self.role == "response" and not _is_bodyless(self._start_line):
            # No framing info: body runs until the flow is flushed.
            self._until_close = True
            self.state = IN_BODY
        else:
            self._body_remaining = 0
            self.state = IN_BODY  # completes immediately below

    def feed(self, data: bytes, ts: int, truncated: bool = False) -> list[HttpUnit]:
        if self.state == OPAQUE:
            self.opaque_bytes += len(data)
            return []
        if truncated:
            self._truncated = True
        self._last_ts = ts
        if self._start_ts == 0 and (data or self.state != AWAITING_HEADERS):
            self._start_ts = ts
        self._buf += data
        units: list[HttpUnit] = []
        try:
            self._advance(ts, units)
        except FramingViolation:
            self.opaque_bytes += len(self._buf)
            self._buf = b""
            self.state = OPAQUE
        return units

    def _advance(self, ts: int, units: list[HttpUnit]) -> None:
        progressed = True
        while progressed:
            progressed = False
            if self.state == AWAITING_HEADERS:
                if not self._buf:
                    return
                # Reject bytes that can never start an HTTP message early,
                # so binary protocols go opaque instead of buffering forever.
                if not _plausible_head_start(self._buf, self.role):
                    raise FramingViolation("not an HTTP message head")
                idx = self._buf.find(b"\r\n\r\n")
                if idx < 0:
                    return
                head, self._buf = self._buf[:idx], self._buf[idx + 4:]
                if self._start_ts == 0:
                    self._start_ts = ts
                self._parse_head(head)
                progressed = True
            elif self.state == IN_SSE:
                assert self._sse is not None
                self._sse_payloads.extend(self._sse.feed(self._buf))
                self._buf = b""
                if self._sse.done:
                    units.append(self._complete())
                    progressed = True
                else:
                    return
            elif self.state == IN_BODY:
                if self._chunked:
                    if not self._consume_chunked():
                        return
                    units.append(self._complete())
                    progressed = True
                elif self._until_close:
                    self._body += self._buf
                    self._buf = b""
                    return
                else:
                    take = min(self._body_remaining, len(self._buf))
                    self._body += self._buf[:take]
                    self._buf = self._buf[take:]
                    self._body_remaining -= take
                    if self._body_remaining == 0:
                        units.append(self._complete())
                        progressed = True
                    else:
                        return

    def _consume_chunked(self) -> bool:
        """Decode chunked framing from the buffer; True when body complete."""
        while True:
            if self._chunk_remaining == -1:
                nl = self._buf.find(b"\r\n")
                if nl < 0:
                    return False
                size_token = self._buf[:nl].split(b";", 1)[0].strip()
                try:
                    size = int(size_token, 16)
                except ValueError:
                    raise FramingViolation(f"bad chunk size: {size_token!r}")
                self._buf = self._buf[nl + 2:]
                if size == 0:
                    self._chunk_remaining = -2  # awaiting trailer CRLF
                else:
                    self._chunk_remaining = size
            if self._chunk_remaining == -2:
                nl = self._buf.find(b"\r\n")
                if nl < 0:
                    return False
                self._buf = self._buf[nl + 2:]
                self._chunk_remaining = -1
                return True
            # chunk payload + trailing CRLF
            need = self._chunk_remaining + 2
            if len(self._buf) < need:
                return False
            self._body += self._buf[:self._chunk_remaining]
            self._buf = self._buf[need:]
            self._chunk_remaining = -1

    def flush(self, ts: int) -> list[HttpUnit]:
        """Complete whatever the stream's end can legally complete."""
        units: list[HttpUnit] = []
        if self.state == IN_SSE and self._sse is not None:
            self._sse_payloads.extend(self._sse.flush())
            self._last_ts = max(self._last_ts, ts)
            units.append(self._complete())
        elif self.state == IN_BODY and self._until_close:
            self._last_ts = max(self._last_ts, ts)
            units.append(self._complete())
        return units


def _is_bodyless(status_line: str) -> bool:
    parts = status_line.split(" ")
    try:
        code = int(parts[1])
    except (IndexError, ValueError):
        return False
    return code in (204, 304) or 100 <= code < 200


_METHODS = (b"GET", b"POST", b"PUT", b"DELETE", b"PATCH", b"HEAD", b"OPTIONS")


def _plausible_head_start(buf: bytes, role: str) -> bool:
    probes = (b"HTTP/",) if role == "response" else _METHODS
    return any(p.startswith(buf[:len(p)]) or buf.startswith(p) for p in probes)


@dataclass(slots=True)
class IntentRecord:
    """A fully reassembled LLM exchange."""

    id: int
    proc: ProcessIdentity
    request_ts: int
    response_end_ts: int
    endpoint: str
    request_messages: list[tuple[str, str]]
    response_text: str
    response_deltas: list[str]
    tool_calls: list[tuple[str, str]]
    truncated: bool
    raw_request_body: bytes = b""
    raw_response_body: bytes = b""
    unknown_format: bool = False
    comm: str = ""


class TlsFlow:
    """Byte reassembly state for one (process, fd) TLS connection."""

    def __init__(self, proc: ProcessIdentity, fd: int, comm: str = ""):
        self.proc = proc
        self.fd = fd
        self.comm = comm
        self.request_parser = _HttpParser("request")
        self.response_parser = _HttpParser("response")
        self.pending_requests: deque[HttpUnit] = deque()
        self.opaque = False
        self.bytes_in = {"read": 0, "write": 0}

    @property
    def state(self) -> str:
        if self.opaque:
            return OPAQUE
        return self.response_parser.state

    def feed_chunk(self, direction: str, data: bytes, ts: int,
                   truncated: bool = False) -> list[HttpUnit]:
        """Feed one plaintext chunk; returns completed protocol units.

        direction is "write" (agent -> API, requests) or "read"
        (API -> agent, responses). After a framing violation the flow is
        opaque: bytes are counted but not parsed.
        """
        self.bytes_in[direction] += len(data)
        if self.opaque:
            return []
        parser = self.request_parser if direction == "write" else self.response_parser
        units = parser.feed(data, ts, truncated)
        if parser.state == OPAQUE:
            self.opaque = True
            return []
        for unit in units:
            if unit.role == "request":
                if self.pending_requests:
                    # Pipelined second request in flight: correctness over
                    # cleverness, stop interpreting this connection.
                    self.opaque = True
                    return []
                self.pending_requests.append(unit)
        return units

    def flush(self, ts: int) -> list[HttpUnit]:
        if self.opaque:
            return []
        return self.response_parser.flush(ts)


def _content_to_text(content: Any) -> str:
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = []
        for block in content:
            if isinstance(block, dict):
                if isinstance(block.get("text"), str):
                    parts.append(block["text"])
                elif isinstance(block.get("content"), str):
                    parts.append(block["content"])
        return "".join(parts)
    return "" if content is None else str(content)


def _extract_request(body: bytes) -> list[tuple[str, str]] | None:
    try:
        obj = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if not isinstance(obj, dict):
        return None
    messages = obj.get("messages")
    out: list[tuple[str, str]] = []
    if isinstance(obj.get("system"), str):
        out.append(("system", obj["system"]))
    if isinstance(messages, list):
        for m in messages:
            if isinstance(m, dict) and "role" in m:
                out.append((str(m["role"]), _content_to_text(m.get("content"))))
        return out
    if isinstance(obj.get("prompt"), str):
        out.append(("user", obj["prompt"]))
        return out
    return None


def _extract_response_json(obj: dict) -> tuple[list[str], list[tuple[str, str]]] | None:
    """Pull text + tool calls from a non-streamed completion body."""
    deltas: list[str] = []
    tools: list[tuple[str, str]] = []
    choices = obj.get("choices")
    if isinstance(choices, list) and choices:
        msg = choices[0].get("message") if isinstance(choices[0], dict) else None
        if isinstance(msg, dict):
            text = msg.get("content")
            if isinstance(text, str):
                deltas.append(text)
            for tc in msg.get("tool_calls") or []:
                fn = tc.get("function", {}) if isinstance(tc, dict) else {}
                if fn.get("name"):
                    tools.append((fn["name"], fn.get("arguments", "")))
            return deltas, tools
        return None
    content = obj.get("content")
    if isinstance(content, list):  # content-block style bodies
        for block in content:
            if not isinstance(block, dict):
                continue
            if block.get("type") == "text" and isinstance(block.get("text"), str):
                deltas.append(block["text"])
            elif block.get("type") == "tool_use" and block.get("name"):
                tools.append((block["name"],
                              json.dumps(block.get("input", {}), sort_keys=True)))
        return deltas, tools
    return None


class _StreamAccumulator:
    """Folds streamed delta events into text deltas and tool calls."""

    def __init__(self) -> None:
        self.deltas: list[str] = []
        self.tools: dict[int, list[str]] = {}
        self.tool_names: dict[int, str] = {}
        self.recognized = False
        self._block_types: dict[int, str] = {}

    def feed(self, payload: str) -> None:
        try:
            obj = json.loads(payload)
        except json.JSONDecodeError:
            return
        if not isinstance(obj, dict):
            return
        choices = obj.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            self.recognized = True
            delta = choices[0].get("delta") or {}
            text = delta.get("content")
            if isinstance(text, str) and text:
                self.deltas.append(text)
            for tc in delta.get("tool_calls") or []:
                idx = tc.get("index", 0)
                fn = tc.get("function", {})
                if fn.get("name"):
                    self.tool_names[idx] = fn["name"]
                if fn.get("arguments"):
                    self.tools.setdefault(idx, []).append(fn["arguments"])
            return
        etype = obj.get("type")
        if etype == "content_block_start":
            self.recognized = True
            idx = obj.get("index", 0)
            block = obj.get("content_block") or {}
            self._block_types[idx] = block.get("type", "")
            if block.get("type") == "tool_use" and block.get("name"):
                self.tool_names[idx] = block["name"]
        elif etype == "content_block_delta":
            self.recognized = True
            idx = obj.get("index", 0)
            delta = obj.get("delta") or {}
            if delta.get("type") == "text_delta" and isinstance(delta.get("text"), str):
                self.deltas.append(delta["text"])
            elif delta.get("type") == "input_json_delta":
                self.tools.setdefault(idx, []).append(delta.get("partial_json", ""))
        elif etype in ("message_start", "message_delta", "message_stop",
                       "content_block_stop", "ping"):
            self.recognized = True

    def tool_calls(self) -> list[tuple[str, str]]:
        out = []
        for idx in sorted(set(self.tool_names) | set(self.tools)):
            name = self.tool_names.get(idx, "")
            args = "".join(self.tools.get(idx, []))
            if name:
                out.append((name, args))
        return out


def assemble_intent(request: HttpUnit | None, response: HttpUnit,
                    proc: ProcessIdentity, intent_id: int,
                    comm: str = "") -> IntentRecord:
    """Lift one completed request/response pair into an IntentRecord.

    Unknown body formats never drop the exchange: the record is produced
    with raw bodies attached and empty semantic fields.
    """
    endpoint = ""
    request_messages: list[tuple[str, str]] = []
    raw_request = b""
    request_ts = response.start_ts
    truncated = response.truncated
    unknown = False

    if request is not None:
        host = request.headers.get("host", "")
        endpoint = host + request.target
        raw_request = request.body
        request_ts = request.start_ts or response.start_ts
        truncated = truncated or request.truncated
        msgs = _extract_request(request.body)
        if msgs is None and request.body:
            unknown = True
        else:
            request_messages = msgs or []

    deltas: list[str] = []
    tool_calls: list[tuple[str, str]] = []
    if response.is_sse:
        acc = _StreamAccumulator()
        for payload in response.sse_payloads:
            acc.feed(payload)
        if acc.recognized:
            deltas = acc.deltas
            tool_calls = acc.tool_calls()
        else:
            # Unknown streaming schema: keep the raw payloads as deltas.
            deltas = list(response.sse_payloads)
            unknown = unknown or bool(response.sse_payloads)
    elif response.body:
        parsed = None
        try:
            obj = json.loads(response.body)
            if isinstance(obj, dict):
                parsed = _extract_response_json(obj)
        except (json.JSONDecodeError, UnicodeDecodeError):
            parsed = None
        if parsed is None:
            unknown = True
        else:
            deltas, tool_calls = parsed

    return IntentRecord(
        id=intent_id,
        proc=proc,
        request_ts=request_ts,
        response_end_ts=response.end_ts,
        endpoint=endpoint,
        request_messages=request_messages,
        response_text="".join(deltas),
        response_deltas=deltas,
        tool_calls=tool_calls,
        truncated=truncated,
        raw_request_body=raw_request,
        raw_response_body=response.body,
        unknown_format=unknown,
        comm=comm,
    )


class ReassemblyEngine:
    """Routes tls_read/tls_write events into flows and emits IntentRecords."""

    def __init__(self) -> None:
        self.flows: dict[tuple[ProcessIdentity, int], TlsFlow] = {}
        self._next_id = 1

    def _flow(self, proc: ProcessIdentity, fd: int, comm: str) -> TlsFlow:
        key = (proc, fd)
        flow = self.flows.get(key)
        if flow is None:
            flow = TlsFlow(proc, fd, comm)
            self.flows[key] = flow
        return flow

    def process_event(self, ev: BoundaryEvent, payload: bytes) -> list[IntentRecord]:
        direction = "write" if ev.kind == "tls_write" else "read"
        flow = self._flow(ev.proc, ev.data.get("fd", 0), ev.comm)
        units = flow.feed_chunk(direction, payload, ev.ts,
                                bool(ev.data.get("truncated")))
        return self._collect(flow, units)

    def _collect(self, flow: TlsFlow, units: Iterable[HttpUnit]) -> list[IntentRecord]:
        out = []
        for unit in units:
            if unit.role != "response":
                continue
            request = flow.pending_requests.popleft() if flow.pending_requests else None
            record = assemble_intent(request, unit, flow.proc,
                                     self._next_id, flow.comm)
            self._next_id += 1
            out.append(record)
        return out

    def flush(self, ts: int) -> list[IntentRecord]:
        out = []
        for flow in self.flows.values():
            out.extend(self._collect(flow, flow.flush(ts)))
        return out
