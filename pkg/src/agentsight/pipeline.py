"""Replay pipeline: trace file -> ordered events -> correlated trace ->
findings -> optional observer verdicts.

Deterministic whenever the observer is disabled: the same (file, config)
always produces byte-identical trace and report JSON.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import analyzers
from .analyzers import Finding, finding_to_obj
from .correlation import (CausalTrace, CorrelationEngine, compact_trace,
                          DEFAULT_WINDOW_NS)
from .ingestion import EventSource
from .observer import (DEFAULT_QUEUE_DEPTH, EmptyTrace, ObserverClient,
                       QueueFull, Verdict, build_analyst_prompt,
                       verdict_to_obj)


@dataclass
class ReplayResult:
    trace: CausalTrace
    findings: list[Finding]
    verdicts: list[Verdict] = field(default_factory=list)
    events_processed: int = 0
    processing_seconds: float = 0.0

    @property
    def has_critical(self) -> bool:
        return any(f.severity == "critical" for f in self.findings)

    def report_obj(self) -> dict:
        intents = sum(1 for i in self.trace.items if i.kind == "intent")
        return {
            "summary": {
                "intents": intents,
                "actions": len(self.trace.items) - intents,
                "raw_event_count": self.trace.raw_event_count,
                "merged_item_count": self.trace.merged_item_count,
                "critical_findings": sum(
                    1 for f in self.findings if f.severity == "critical"),
            },
            "findings": [finding_to_obj(f) for f in self.findings],
            "verdicts": [verdict_to_obj(v) for v in self.verdicts],
        }


def replay(trace_path: str,
           window_ns: int = DEFAULT_WINDOW_NS,
           reorder_horizon_ns: int | None = None,
           loop_threshold: int = analyzers.DEFAULT_LOOP_THRESHOLD,
           contention_threshold: int = analyzers.DEFAULT_CONTENTION_THRESHOLD,
           sensitive_paths: tuple[str, ...] = analyzers.DEFAULT_SENSITIVE_PATHS,
           observer_client: ObserverClient | None = None,
           observer_budget: int = 8000,
           drain_timeout_s: float | None = 60.0,
           ) -> ReplayResult:
    """Run the full pipeline over one trace file.

    The observer, when given, is fed asynchronously; event processing
    never blocks on it. ``processing_seconds`` covers ingestion through
    findings, excluding any wait for verdicts.
    """
    kwargs = {}
    if reorder_horizon_ns is not None:
        kwargs["reorder_horizon_ns"] = reorder_horizon_ns

    t0 = time.perf_counter()
    engine = CorrelationEngine(window_ns=window_ns)
    n = 0
    with EventSource(trace_path, **kwargs) as src:
        for ev in src.events():
            engine.feed(ev)
            n += 1
    trace = compact_trace(engine.finish())
    findings = analyzers.run_all(
        trace,
        loop_threshold=loop_threshold,
        contention_threshold=contention_threshold,
        sensitive_paths=sensitive_paths,
    )

    pending = None
    if observer_client is not None and trace.items:
        try:
            request = build_analyst_prompt(trace, findings, observer_budget)
            pending = observer_client.submit(request)
        except (EmptyTrace, QueueFull):
            pending = None
    elapsed = time.perf_counter() - t0

    verdicts: list[Verdict] = []
    if pending is not None:
        timeout = drain_timeout_s
        try:
            verdicts.append(pending.result(timeout=timeout))
        except TimeoutError:
            pass

    return ReplayResult(
        trace=trace,
        findings=findings,
        verdicts=verdicts,
        events_processed=n,
        processing_seconds=elapsed,
    )
