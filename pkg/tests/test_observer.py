import json
import time

import pytest

from agentsight.correlation import compact_trace, correlate_stream
from agentsight.ingestion import event_from_obj
from agentsight.observer import (DEFAULT_QUEUE_DEPTH, EmptyTrace, MockBackend,
                                 ObserverClient, ObserverRequest, QueueFull,
                                 Verdict, build_analyst_prompt, parse_verdict)
from agentsight.analyzers import run_all
from agentsight.synth import injection_fixture


def compacted_trace():
    raw = correlate_stream([event_from_obj(o) for o in injection_fixture()])
    return compact_trace(raw)


def good_response(risk=0.95, label="malicious", cited=(1, 2)):
    obj = {"risk": risk, "label": label, "rationale": "chain observed",
           "cited_items": list(cited)}
    return "Here is my analysis.\n```json\n" + json.dumps(obj) + "\n```\n"


class TestBuildAnalystPrompt:
    def test_deterministic(self):
        trace = compacted_trace()
        findings = run_all(trace)
        a = build_analyst_prompt(trace, findings)
        b = build_analyst_prompt(trace, findings)
        assert a.prompt == b.prompt

    def test_contains_role_and_schema(self):
        trace = compacted_trace()
        req = build_analyst_prompt(trace, run_all(trace))
        assert req.prompt.startswith("Act as a security analyst")
        assert '"risk"' in req.prompt and "```json" in req.prompt

    def test_every_item_referenced_when_within_budget(self):
        trace = compacted_trace()
        req = build_analyst_prompt(trace, run_all(trace), budget=100_000)
        for item in trace.items:
            assert f"[{item.id}]" in req.prompt

    def test_truncation_keeps_intents(self):
        trace = compacted_trace()
        req = build_analyst_prompt(trace, run_all(trace), budget=700)
        full = build_analyst_prompt(trace, run_all(trace), budget=100_000)
        assert len(req.prompt) < len(full.prompt)
        for item in trace.items:
            if item.__class__.__name__ == "IntentItem":
                assert f"[{item.id}] intent" in req.prompt

    def test_empty_trace_raises(self):
        empty = correlate_stream([])
        with pytest.raises(EmptyTrace):
            build_analyst_prompt(empty, [])

    def test_no_credential_material_in_prompt(self, monkeypatch):
        monkeypatch.setenv("AGENTSIGHT_OBSERVER_API_KEY", "sk-sentinel-123")
        trace = compacted_trace()
        req = build_analyst_prompt(trace, run_all(trace))
        assert "sk-sentinel-123" not in req.prompt


class TestParseVerdict:
    def test_fenced_json(self):
        v = parse_verdict(good_response())
        assert v.risk_score == 0.95
        assert v.verdict_label == "malicious"
        assert v.cited_items == [1, 2]
        assert not v.unparseable

    def test_risk_clamped(self):
        assert parse_verdict(good_response(risk=7)).risk_score == 1.0
        assert parse_verdict(good_response(risk=-3)).risk_score == 0.0

    def test_unknown_label_maps_to_suspicious(self):
        v = parse_verdict(good_response(label="catastrophic"))
        assert v.verdict_label == "suspicious"

    def test_bare_json_accepted(self):
        v = parse_verdict('{"risk": 0.2, "label": "benign"}')
        assert v.risk_score == 0.2 and v.verdict_label == "benign"

    def test_unparseable_keeps_raw_text(self):
        v = parse_verdict("I cannot help with that.")
        assert v.unparseable
        assert v.raw_text == "I cannot help with that."

    def test_total_over_junk(self):
        for text in ("", "```json\nnot json\n```", '{"other": 1}', "{{{"):
            v = parse_verdict(text)
            assert isinstance(v, Verdict)
            assert 0.0 <= v.risk_score <= 1.0


def make_request(tag="t"):
    return ObserverRequest(prompt=f"analyze {tag}", trace_item_ids=[1],
                           token_budget=100)


class TestObserverClient:
    def test_scripted_verdict_roundtrip(self):
        client = ObserverClient(MockBackend([good_response()]))
        verdict = client.submit(make_request()).result(timeout=5)
        client.close()
        assert verdict.risk_score == 0.95 and not verdict.unavailable

    def test_retry_then_success(self):
        backend = MockBackend([None, None, good_response(risk=0.4)])
        client = ObserverClient(backend, backoff_s=0.001)
        verdict = client.submit(make_request()).result(timeout=5)
        client.close()
        assert backend.calls == 3
        assert verdict.risk_score == 0.4 and not verdict.unavailable

    def test_exhausted_retries_yield_unavailable(self):
        backend = MockBackend([None])
        client = ObserverClient(backend, attempts=3, backoff_s=0.001)
        verdict = client.submit(make_request()).result(timeout=5)
        client.close()
        assert verdict.unavailable
        assert backend.calls == 3

    def test_queue_bound_enforced(self):
        backend = MockBackend(hang=True)
        client = ObserverClient(backend, attempts=1, backoff_s=0.001,
                                attempt_timeout_s=0.2)
        futures = [client.submit(make_request(str(i)))
                   for i in range(DEFAULT_QUEUE_DEPTH)]
        with pytest.raises(QueueFull):
            client.submit(make_request("overflow"))
        # Liveness: every accepted request still terminates via the retry
        # bound, resolving to an unavailable verdict.
        for fut in futures:
            assert fut.result(timeout=10).unavailable
        client.close()

    def test_submission_order_preserved(self):
        responses = [good_response(risk=r) for r in (0.1, 0.2, 0.3)]
        client = ObserverClient(MockBackend(responses))
        futures = [client.submit(make_request(str(i))) for i in range(3)]
        got = [f.result(timeout=5).risk_score for f in futures]
        client.close()
        assert got == [0.1, 0.2, 0.3]

    def test_submit_does_not_block_on_slow_backend(self):
        client = ObserverClient(MockBackend(hang=True), attempts=1,
                                attempt_timeout_s=1.0)
        start = time.monotonic()
        fut = client.submit(make_request())
        assert time.monotonic() - start < 0.1
        assert fut.result(timeout=5).unavailable
        client.close()

    def test_drain_waits_for_completion(self):
        client = ObserverClient(MockBackend([good_response()]))
        fut = client.submit(make_request())
        client.drain(timeout_s=5)
        assert fut.done()
        client.close()
