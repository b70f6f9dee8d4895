import random

import pytest
from hypothesis import given, strategies as st

from agentsight.events import (BoundaryEvent, IdentityInvalid, ProcessIdentity,
                               SchemaMismatch, order_key, validate_event)


def make_event(kind="proc_exec", ts=100, seq=1, pid=10, data=None, **kw):
    if data is None:
        data = {"filename": "/bin/bash", "argv": ["bash", "-c", "make"]}
    return BoundaryEvent(seq=seq, ts=ts, proc=ProcessIdentity(pid),
                         tid=pid, comm="bash", kind=kind, data=data, **kw)


class TestValidateEvent:
    def test_schema_complete_exec_accepted(self):
        ev = make_event()
        assert validate_event(ev) is ev

    def test_tls_read_missing_payload_rejected(self):
        ev = make_event(kind="tls_read",
                        data={"len": 5, "truncated": False, "fd": 3})
        with pytest.raises(SchemaMismatch):
            validate_event(ev)

    def test_pid_zero_rejected(self):
        with pytest.raises(IdentityInvalid):
            ProcessIdentity(0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(SchemaMismatch):
            validate_event(make_event(kind="nonsense", data={}))

    def test_wrong_type_rejected(self):
        ev = make_event(kind="fs_open", data={"path": "/etc/passwd", "fd": "3"})
        with pytest.raises(SchemaMismatch):
            validate_event(ev)

    def test_bool_not_accepted_as_int(self):
        ev = make_event(kind="fs_open", data={"path": "/x", "fd": True})
        with pytest.raises(SchemaMismatch):
            validate_event(ev)

    def test_nonpositive_ts_rejected(self):
        with pytest.raises(SchemaMismatch):
            validate_event(make_event(ts=0))

    @given(st.dictionaries(st.text(max_size=8),
                           st.one_of(st.integers(), st.text(max_size=8),
                                     st.booleans()),
                           max_size=5),
           st.sampled_from(sorted(["tls_read", "fs_open", "proc_exec",
                                   "net_connect", "bogus"])))
    def test_total_over_arbitrary_payloads(self, data, kind):
        ev = make_event(kind=kind, data=data)
        try:
            validate_event(ev)
        except (SchemaMismatch, IdentityInvalid):
            pass  # exactly one named error is the only legal failure


class TestOrderKey:
    def test_seq_breaks_ts_tie(self):
        a = make_event(ts=100, seq=1)
        b = make_event(ts=100, seq=2)
        assert order_key(a) < order_key(b)

    def test_ts_dominates(self):
        assert order_key(make_event(ts=50, seq=9)) < order_key(make_event(ts=100, seq=1))

    def test_pid_final_tiebreak(self):
        a = make_event(ts=100, seq=1, pid=7)
        b = make_event(ts=100, seq=1, pid=9)
        assert order_key(a) < order_key(b)

    @given(st.lists(st.tuples(st.integers(1, 50), st.integers(0, 50),
                              st.integers(1, 50)), max_size=40),
           st.randoms())
    def test_sort_is_shuffle_invariant(self, keys, rng):
        events = [make_event(ts=ts, seq=seq, pid=pid)
                  for ts, seq, pid in keys]
        baseline = [order_key(e) for e in sorted(events, key=order_key)]
        shuffled = list(events)
        rng.shuffle(shuffled)
        assert [order_key(e) for e in sorted(shuffled, key=order_key)] == baseline
