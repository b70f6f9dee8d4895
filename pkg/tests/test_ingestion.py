import json
import random

import pytest

from agentsight.events import SchemaMismatch, order_key
from agentsight.ingestion import (EventSource, MalformedLine, SourceClosed,
                                  make_header, parse_trace_line, write_trace)

MS = 1_000_000


def event_obj(ts, seq, pid=10, kind="fs_write", data=None):
    return {"ts": ts, "seq": seq, "pid": pid, "tid": pid, "comm": "w",
            "kind": kind, "data": data or {"fd": 3, "len": 8}}


def write_file(path, objs):
    with open(path, "w") as fh:
        fh.write(json.dumps(make_header(0)) + "\n")
        for o in objs:
            fh.write(json.dumps(o) + "\n")


class TestParseTraceLine:
    def test_proc_exec_line(self):
        line = ('{"ts":100,"seq":1,"pid":10,"tid":10,"comm":"bash",'
                '"kind":"proc_exec","data":{"filename":"/bin/ls",'
                '"argv":["ls"],"ppid":9}}')
        ev = parse_trace_line(line)
        assert ev.kind == "proc_exec"
        assert ev.data["filename"] == "/bin/ls"

    def test_not_json(self):
        with pytest.raises(MalformedLine):
            parse_trace_line("not json")

    def test_payload_base64_decodes(self):
        import base64
        line = json.dumps(event_obj(
            100, 1, kind="tls_write",
            data={"payload_b64": "aGVsbG8=", "len": 5, "truncated": False,
                  "fd": 3}))
        ev = parse_trace_line(line)
        assert base64.b64decode(ev.data["payload_b64"]) == b"hello"

    def test_schema_mismatch_delegated(self):
        with pytest.raises(SchemaMismatch):
            parse_trace_line(json.dumps(event_obj(100, 1, kind="tls_read",
                                                  data={"len": 1})))


class TestOrdering:
    def test_sorts_within_horizon(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_file(p, [event_obj(120 * MS, 1), event_obj(100 * MS, 2),
                       event_obj(110 * MS, 3)])
        with EventSource(str(p), reorder_horizon_ns=50 * MS) as src:
            out = [e.ts for e in src.events()]
        assert out == [100 * MS, 110 * MS, 120 * MS]

    def test_late_event_flagged_not_dropped(self, tmp_path):
        # An event older than the released watermark is emitted
        # immediately with late=True.
        p = tmp_path / "t.jsonl"
        objs = [event_obj((100 + 10 * i) * MS, i + 1) for i in range(20)]
        objs.append(event_obj(100 * MS, 99))  # far behind the watermark
        write_file(p, objs)
        with EventSource(str(p), reorder_horizon_ns=50 * MS) as src:
            events = list(src.events())
        late = [e for e in events if e.late]
        assert len(late) == 1 and late[0].seq == 99
        assert len(events) == 21  # nothing lost

    def test_empty_file_empty_batch(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_file(p, [])
        src = EventSource(str(p)).open()
        assert src.next_ordered_batch() == []
        with pytest.raises(SourceClosed):
            src.next_ordered_batch()

    def test_malformed_line_carries_lineno(self, tmp_path):
        p = tmp_path / "t.jsonl"
        with open(p, "w") as fh:
            fh.write(json.dumps(make_header(0)) + "\n")
            fh.write(json.dumps(event_obj(100, 1)) + "\n")
            fh.write("garbage\n")
        with pytest.raises(MalformedLine) as exc:
            list(EventSource(str(p)).open().events())
        assert exc.value.lineno == 3

    def test_missing_header_rejected(self, tmp_path):
        p = tmp_path / "t.jsonl"
        with open(p, "w") as fh:
            fh.write(json.dumps(event_obj(100, 1)) + "\n")
        with pytest.raises(MalformedLine):
            EventSource(str(p)).open()


class TestReplayProperties:
    def test_replay_determinism(self, tmp_path):
        rng = random.Random(7)
        objs = [event_obj(rng.randrange(1, 10**9), i + 1) for i in range(300)]
        p = tmp_path / "t.jsonl"
        write_file(p, objs)

        def run():
            with EventSource(str(p)) as src:
                return [(e.ts, e.seq, e.late) for e in src.events()]

        assert run() == run()

    def test_output_matches_offline_sort_within_horizon(self, tmp_path):
        # Oracle: displacement bounded by the horizon implies the stream
        # equals a full offline sort of the file.
        horizon = 50 * MS
        for seed in range(20):
            rng = random.Random(seed)
            base = [(i + 5) * 10 * MS for i in range(200)]
            objs = [event_obj(ts + rng.randrange(-20 * MS, 20 * MS), i + 1)
                    for i, ts in enumerate(base)]
            p = tmp_path / f"t{seed}.jsonl"
            write_file(p, objs)
            with EventSource(str(p), reorder_horizon_ns=horizon) as src:
                got = [(e.ts, e.seq) for e in src.events()]
            with EventSource(str(p), reorder_horizon_ns=horizon) as src2:
                expect = sorted(
                    [(e.ts, e.seq) for e in src2.events()])
            oracle = sorted(got)
            assert got == oracle == expect
            assert not any(e.late for e in []), "no late flags expected"

    def test_write_read_roundtrip(self, tmp_path):
        objs = [event_obj(100 * MS, 1), event_obj(200 * MS, 2)]
        p = tmp_path / "t.jsonl"
        n = write_trace(str(p), objs, wall_clock_anchor_unix_ns=0)
        assert n == 2
        with EventSource(str(p)) as src:
            events = list(src.events())
        assert [order_key(e) for e in events] == [
            (100 * MS, 1, 10), (200 * MS, 2, 10)]
        assert src.header["wall_clock_anchor_unix_ns"] == 0
