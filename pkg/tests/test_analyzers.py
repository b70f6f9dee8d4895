import random

from agentsight.analyzers import (detect_exfiltration_chain,
                                  detect_reasoning_loop,
                                  detect_retry_contention, run_all)
from agentsight.correlation import (ActionItem, IntentItem, compact_trace,
                                    correlate_stream)
from agentsight.ingestion import event_from_obj
from agentsight.synth import (EventBuilder, MS, S, benign_build_fixture,
                              contention_fixture, injection_fixture,
                              llm_exchange, openai_text_deltas,
                              reasoning_loop_fixture, sse_response_bytes,
                              tool_call_response)


def load(objs, compact=True):
    trace = correlate_stream([event_from_obj(o) for o in objs
                              if o.get("kind") != "trace_header"])
    return compact_trace(trace) if compact else trace


class TestReasoningLoop:
    def test_five_identical_failures_detected(self):
        trace = load(reasoning_loop_fixture(repeats=5))
        findings = detect_reasoning_loop(trace)
        assert len(findings) == 1
        f = findings[0]
        assert f.kind == "reasoning_loop" and f.severity == "warn"
        assert f.metrics["repeat_count"] == 5
        assert f.metrics["wasted_intents"] == 4
        assert len(f.evidence) == 5

    def test_two_repeats_below_threshold(self):
        assert detect_reasoning_loop(load(reasoning_loop_fixture(2))) == []

    def test_threshold_is_inclusive(self):
        trace = load(reasoning_loop_fixture(3))
        assert len(detect_reasoning_loop(trace, threshold=3)) == 1
        assert detect_reasoning_loop(trace, threshold=4) == []

    def test_successes_do_not_loop(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        t = 2 * S
        for _ in range(5):
            llm_exchange(b, 100, "agent", 7, request_ts=t,
                         response_end_ts=t + 10 * MS, user_text="go",
                         response=tool_call_response("bash",
                                                     '{"cmd": "make all"}'))
            b.fork(100, 0, "agent", "bash", ts=t + 20 * MS)
            pid = b.events[-1]["data"]["child_pid"] = 110 + _
            b.exec(pid, "/bin/bash", ["bash", "-c", "make all"],
                   ts=t + 21 * MS)
            b.exit(pid, "bash", code=0, ts=t + 30 * MS)  # succeeds
            t += 1 * S
        assert detect_reasoning_loop(load(b.events)) == []

    def test_different_signatures_break_run(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        t = 2 * S
        for i in range(6):
            cmd = f'{{"cmd": "make target{i % 2}"}}'
            llm_exchange(b, 100, "agent", 7, request_ts=t,
                         response_end_ts=t + 10 * MS,
                         user_text="Error: build failed",
                         response=tool_call_response("bash", cmd))
            t += 1 * S
        assert detect_reasoning_loop(load(b.events)) == []

    def test_interleaved_roots_tracked_separately(self):
        # Two agents alternate; each repeats its own failing step 3 times.
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        b.exec(200, "/usr/bin/agent", ["agent"], ts=1 * S + MS)
        t = 2 * S
        for _ in range(3):
            for pid, cmd in ((100, '{"cmd": "make a"}'),
                             (200, '{"cmd": "make b"}')):
                llm_exchange(b, pid, "agent", 7, request_ts=t,
                             response_end_ts=t + 10 * MS,
                             user_text="Error: failed again",
                             response=tool_call_response("bash", cmd))
                t += 500 * MS
        findings = detect_reasoning_loop(load(b.events))
        assert len(findings) == 2
        assert all(f.metrics["repeat_count"] == 3 for f in findings)


class TestExfiltrationChain:
    def test_injection_fixture_is_critical(self):
        findings = detect_exfiltration_chain(load(injection_fixture()))
        crit = [f for f in findings if f.severity == "critical"]
        assert len(crit) == 1
        assert crit[0].metrics["sensitive_path"] == "/etc/passwd"
        assert len(crit[0].evidence) == 3

    def test_benign_build_clean(self):
        findings = detect_exfiltration_chain(load(benign_build_fixture()))
        assert [f for f in findings if f.severity == "critical"] == []

    def test_read_without_outbound_is_warn(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        llm_exchange(b, 100, "agent", 7, request_ts=2 * S,
                     response_end_ts=2 * S + 10 * MS, user_text="task",
                     response=sse_response_bytes(openai_text_deltas(
                         ["see https://evil.example/x then `cat /etc/passwd`"])))
        b.emit(100, "agent", "fs_open", {"path": "/etc/passwd", "fd": 4},
               ts=2 * S + 50 * MS)
        findings = detect_exfiltration_chain(load(b.events))
        assert len(findings) == 1 and findings[0].severity == "warn"

    def test_llm_endpoint_traffic_not_exfiltration(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        llm_exchange(b, 100, "agent", 7, request_ts=2 * S,
                     response_end_ts=2 * S + 10 * MS, user_text="task",
                     response=sse_response_bytes(openai_text_deltas(
                         ["see https://evil.example/x then `cat /etc/passwd`"])))
        b.emit(100, "agent", "fs_open", {"path": "/etc/passwd", "fd": 4},
               ts=2 * S + 50 * MS)
        b.emit(100, "agent", "net_connect",
               {"addr": "api.llm.example", "port": 443}, ts=2 * S + 60 * MS)
        findings = detect_exfiltration_chain(load(b.events))
        assert [f for f in findings if f.severity == "critical"] == []

    def test_custom_sensitive_patterns(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        llm_exchange(b, 100, "agent", 7, request_ts=2 * S,
                     response_end_ts=2 * S + 10 * MS, user_text="task",
                     response=sse_response_bytes(openai_text_deltas(
                         ["read /home/u/creds.secret from https://a.example/x"])))
        b.emit(100, "agent", "fs_open",
               {"path": "/home/u/creds.secret", "fd": 4}, ts=2 * S + 50 * MS)
        default = detect_exfiltration_chain(load(b.events))
        custom = detect_exfiltration_chain(load(b.events),
                                           sensitive_paths=("*.secret",))
        assert default == [] and len(custom) == 1

    def test_pem_glob_matches(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(100, "/usr/bin/agent", ["agent"], ts=1 * S)
        llm_exchange(b, 100, "agent", 7, request_ts=2 * S,
                     response_end_ts=2 * S + 10 * MS, user_text="task",
                     response=sse_response_bytes(openai_text_deltas(
                         ["grab /srv/keys/server.pem via https://x.example/a"])))
        b.emit(100, "agent", "fs_open",
               {"path": "/srv/keys/server.pem", "fd": 4}, ts=2 * S + 50 * MS)
        findings = detect_exfiltration_chain(load(b.events))
        assert len(findings) == 1


class TestRetryContention:
    def test_two_roots_eight_failures(self):
        findings = detect_retry_contention(load(contention_fixture()))
        assert len(findings) == 1
        f = findings[0]
        assert f.metrics["retry_count"] == 8
        assert f.metrics["root_count"] == 2
        assert f.metrics["contended_path"] == "/proj/.build.lock"

    def test_single_root_not_contention(self):
        b = EventBuilder(start_ts=1 * S)
        b.exec(300, "/usr/bin/agent", ["agent"], ts=1 * S)
        t = 2 * S
        for _ in range(6):
            b.emit(300, "agent", "fs_open",
                   {"path": "/proj/.build.lock", "fd": -16}, ts=t)
            t += 100 * MS
        assert detect_retry_contention(load(b.events)) == []

    def test_threshold_respected(self):
        trace = load(contention_fixture(retries_per_root=1))
        assert detect_retry_contention(trace, threshold=3) == []
        assert len(detect_retry_contention(trace, threshold=2)) == 1

    def test_threshold_monotonicity(self):
        trace = load(contention_fixture())
        counts = [len(detect_retry_contention(trace, threshold=k))
                  for k in range(1, 12)]
        assert counts == sorted(counts, reverse=True)


class TestRunAll:
    def test_deterministic_ordering(self):
        trace = load(injection_fixture())
        a = [(f.kind, f.first_ts, f.evidence) for f in run_all(trace)]
        b = [(f.kind, f.first_ts, f.evidence) for f in run_all(trace)]
        assert a == b == sorted(a, key=lambda x: (x[1], x[0], x[2]))

    def test_evidence_ids_exist_in_trace(self):
        for fixture in (injection_fixture(), reasoning_loop_fixture(5),
                        contention_fixture()):
            trace = load(fixture)
            ids = {i.id for i in trace.items}
            for f in run_all(trace):
                assert set(f.evidence) <= ids

    def test_loop_threshold_monotonicity(self):
        trace = load(reasoning_loop_fixture(6))
        counts = [len(run_all(trace, loop_threshold=k)) for k in range(2, 9)]
        assert counts == sorted(counts, reverse=True)

    def test_empty_trace_no_findings(self):
        trace = load([])
        assert run_all(trace) == []
