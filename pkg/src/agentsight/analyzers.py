"""Rule-based detectors over compacted causal traces.

Three detectors formalize recurring agent pathologies: reasoning loops
(the agent retries the exact same failing step), exfiltration chains
(fetched external content leads to a sensitive read and an outbound
connection), and retry contention (multiple agent roots repeatedly fail
on the same path). All detectors are pure functions over immutable
traces and produce deterministically ordered findings.
"""

from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass, field
from typing import Any

from .correlation import ActionItem, CausalTrace, IntentItem
from .events import ProcessIdentity

DEFAULT_LOOP_THRESHOLD = 3
DEFAULT_CONTENTION_THRESHOLD = 3
DEFAULT_SENSITIVE_PATHS = (
    "/etc/passwd",
    "/etc/shadow",
    "~/.ssh/*",
    "*.pem",
    "*.env",
)

_ERROR_RE = re.compile(
    r"(?i)\b(error|failed|failure|exception|traceback|denied|not found)\b")


@dataclass(slots=True)
class Finding:
    kind: str  # reasoning_loop | exfiltration_chain | retry_contention
    severity: str  # info | warn | critical
    evidence: list[int]
    explanation: str
    metrics: dict[str, Any] = field(default_factory=dict)
    first_ts: int = 0


def finding_to_obj(f: Finding) -> dict:
    return {
        "kind": f.kind,
        "severity": f.severity,
        "evidence": f.evidence,
        "explanation": f.explanation,
        "metrics": f.metrics,
        "first_ts": f.first_ts,
    }


def _intents(trace: CausalTrace) -> list[IntentItem]:
    return [i for i in trace.items if isinstance(i, IntentItem)]


def _actions(trace: CausalTrace) -> list[ActionItem]:
    return [i for i in trace.items if isinstance(i, ActionItem)]


def _linked_actions(trace: CausalTrace, intent_id: int) -> list[ActionItem]:
    return [a for a in _actions(trace)
            if any(l.intent_id == intent_id for l in a.links)]


def _normalize(text: str) -> str:
    text = " ".join(text.split())
    try:
        return json.dumps(json.loads(text), sort_keys=True)
    except (json.JSONDecodeError, TypeError):
        return text


def _intent_signature(trace: CausalTrace, intent: IntentItem) -> tuple:
    calls = tuple((name, _normalize(args))
                  for name, args in intent.record.tool_calls)
    action_args = []
    for action in _linked_actions(trace, intent.id):
        data = action.data
        for key in ("filename", "path", "addr"):
            if data.get(key):
                action_args.append(str(data[key]))
        if data.get("argv"):
            action_args.append(" ".join(data["argv"]))
    return (calls, tuple(sorted(set(action_args))))


def _intent_failed(trace: CausalTrace, intent: IntentItem) -> bool:
    if any(a.failed for a in _linked_actions(trace, intent.id)):
        return True
    rec = intent.record
    if _ERROR_RE.search(rec.response_text or ""):
        return True
    return any(_ERROR_RE.search(text or "")
               for role, text in rec.request_messages
               if role in ("tool", "user", "function"))


def detect_reasoning_loop(trace: CausalTrace,
                          threshold: int = DEFAULT_LOOP_THRESHOLD,
                          ) -> list[Finding]:
    """Flag runs of >= threshold consecutive identical failing intents.

    Consecutive is evaluated per lineage root so interleaved agents do
    not break each other's runs.
    """
    findings: list[Finding] = []
    by_root: dict[ProcessIdentity | None, list[IntentItem]] = {}
    for intent in _intents(trace):
        by_root.setdefault(intent.root, []).append(intent)

    for root_intents in by_root.values():
        run: list[IntentItem] = []
        run_sig: tuple | None = None

        def close_run() -> None:
            if len(run) >= threshold and all(
                    _intent_failed(trace, i) for i in run):
                period = 0
                if len(run) > 1:
                    period = (run[-1].ts - run[0].ts) // (len(run) - 1)
                findings.append(Finding(
                    kind="reasoning_loop",
                    severity="warn",
                    evidence=[i.id for i in run],
                    explanation=(
                        f"agent repeated the same failing step "
                        f"{len(run)} times without adapting"),
                    metrics={
                        "repeat_count": len(run),
                        "wasted_intents": len(run) - 1,
                        "period_ns": period,
                    },
                    first_ts=run[0].ts,
                ))

        for intent in root_intents:
            sig = _intent_signature(trace, intent)
            if sig == run_sig and sig != ((), ()):
                run.append(intent)
            else:
                close_run()
                run = [intent]
                run_sig = sig
        close_run()
    return _ordered(findings)


def _endpoint_host(endpoint: str) -> str:
    return endpoint.split("/", 1)[0].split(":", 1)[0]


def _is_sensitive(path: str, patterns: tuple[str, ...]) -> bool:
    for pat in patterns:
        if pat.startswith("~"):
            pat = "*" + pat[1:]
        if path == pat or fnmatch.fnmatch(path, pat):
            return True
    return False


def _destinations(action: ActionItem) -> list[str]:
    out = []
    for key in ("host", "addr"):
        if action.data.get(key):
            out.append(str(action.data[key]))
    return out


def detect_exfiltration_chain(
        trace: CausalTrace,
        sensitive_paths: tuple[str, ...] = DEFAULT_SENSITIVE_PATHS,
        ) -> list[Finding]:
    """Detect fetch -> sensitive read -> outbound exfiltration chains.

    Critical when, within one lineage root, an intent carrying an
    external URL links to a sensitive-file read that is followed by an
    outbound connection to a host that is not any LLM endpoint. A linked
    sensitive read without the outbound step yields a warning.
    """
    findings: list[Finding] = []
    actions = _actions(trace)
    llm_hosts = {_endpoint_host(i.record.endpoint)
                 for i in _intents(trace) if i.record.endpoint}

    for intent in _intents(trace):
        ep_host = _endpoint_host(intent.record.endpoint)
        urls = [t for t in intent.artifacts if t.cls == "url"]
        external = [t for t in urls
                    if ep_host and ep_host not in t.text or not ep_host]

        reads = [a for a in actions
                 if a.kind in ("fs_open", "fs_read")
                 and a.data.get("path")
                 and _is_sensitive(a.data["path"], sensitive_paths)
                 and any(l.intent_id == intent.id for l in a.links)]
        if not reads:
            continue
        read = reads[0]

        exfil = None
        for a in actions:
            if a.kind not in ("net_connect", "net_send"):
                continue
            if a.first_ts < read.first_ts or a.root != intent.root:
                continue
            dests = _destinations(a)
            if not dests:
                continue
            if any(d in llm_hosts or d == ep_host for d in dests):
                continue  # traffic to the LLM endpoint itself is expected
            exfil = a
            break

        if external and exfil is not None:
            findings.append(Finding(
                kind="exfiltration_chain",
                severity="critical",
                evidence=[intent.id, read.id, exfil.id],
                explanation=(
                    f"external content from {external[0].text} led to a read "
                    f"of {read.data['path']} followed by an outbound "
                    f"connection to {_destinations(exfil)[0]}"),
                metrics={
                    "steps": 3,
                    "sensitive_path": read.data["path"],
                    "destination": _destinations(exfil)[0],
                    "source_url": external[0].text,
                },
                first_ts=intent.ts,
            ))
        else:
            findings.append(Finding(
                kind="exfiltration_chain",
                severity="warn",
                evidence=[intent.id, read.id],
                explanation=(
                    f"sensitive file {read.data['path']} was read following "
                    f"an LLM response, without an observed outbound step"),
                metrics={"steps": 2, "sensitive_path": read.data["path"]},
                first_ts=intent.ts,
            ))
    return _ordered(findings)


def detect_retry_contention(
        trace: CausalTrace,
        threshold: int = DEFAULT_CONTENTION_THRESHOLD,
        ) -> list[Finding]:
    """Flag repeated failures on one path interleaved across >= 2 roots."""
    by_path: dict[str, list[ActionItem]] = {}
    for action in _actions(trace):
        if not action.failed:
            continue
        path = action.data.get("path")
        if path:
            by_path.setdefault(path, []).append(action)

    findings: list[Finding] = []
    for path, items in by_path.items():
        roots = {a.root for a in items}
        retry_count = sum(a.count for a in items)
        if len(roots) >= 2 and retry_count >= threshold:
            ordered = sorted(items, key=lambda a: a.first_ts)
            findings.append(Finding(
                kind="retry_contention",
                severity="warn",
                evidence=[a.id for a in ordered],
                explanation=(
                    f"{len(roots)} agent roots failed {retry_count} times "
                    f"contending on {path}"),
                metrics={
                    "retry_count": retry_count,
                    "contended_path": path,
                    "root_count": len(roots),
                },
                first_ts=ordered[0].first_ts,
            ))
    return _ordered(findings)


def _ordered(findings: list[Finding]) -> list[Finding]:
    return sorted(findings, key=lambda f: (f.first_ts, f.kind, f.evidence))


def run_all(trace: CausalTrace,
            loop_threshold: int = DEFAULT_LOOP_THRESHOLD,
            contention_threshold: int = DEFAULT_CONTENTION_THRESHOLD,
            sensitive_paths: tuple[str, ...] = DEFAULT_SENSITIVE_PATHS,
            ) -> list[Finding]:
    findings = (detect_reasoning_loop(trace, loop_threshold)
                + detect_exfiltration_chain(trace, sensitive_paths)
                + detect_retry_contention(trace, contention_threshold))
    return _ordered(findings)
