import random

import pytest

from agentsight.events import BoundaryEvent, ProcessIdentity
from agentsight.lineage import (DuplicateBirth, LineageTree, UNKNOWN_ROOT,
                                UnknownIdentity)


def pev(kind, pid, ts, **data):
    return BoundaryEvent(seq=ts, ts=ts, proc=ProcessIdentity(pid), tid=pid,
                         comm=data.pop("comm", "p"), kind=kind, data=data)


def build_chain():
    tree = LineageTree()
    tree.add_root(ProcessIdentity(100), comm="agent")
    tree.apply_process_event(pev("proc_fork", 100, 10, child_pid=101))
    tree.apply_process_event(
        pev("proc_exec", 101, 11, filename="/bin/bash", argv=["bash"]))
    tree.apply_process_event(pev("proc_fork", 101, 12, child_pid=102))
    return tree


class TestApplyProcessEvent:
    def test_fork_then_exec(self):
        tree = build_chain()
        node = tree.nodes[ProcessIdentity(101)]
        assert node.parent == ProcessIdentity(100)
        assert node.comm == "bash"
        assert node.exec_history[0][1] == "/bin/bash"

    def test_exit_retains_node(self):
        tree = build_chain()
        tree.apply_process_event(pev("proc_exit", 101, 20, exit_code=0))
        node = tree.nodes[ProcessIdentity(101)]
        assert not node.alive
        assert node.exit_code == 0

    def test_orphan_fork_under_synthetic_root(self):
        tree = LineageTree()
        node = tree.apply_process_event(pev("proc_fork", 999, 5, child_pid=1000))
        assert node.orphan
        assert node.parent == UNKNOWN_ROOT

    def test_duplicate_birth_rejected(self):
        tree = build_chain()
        with pytest.raises(DuplicateBirth):
            tree.apply_process_event(pev("proc_fork", 100, 30, child_pid=101))


class TestIsDescendant:
    def test_transitive_chain(self):
        tree = build_chain()
        assert tree.is_descendant(ProcessIdentity(102), ProcessIdentity(100))

    def test_reflexive(self):
        tree = build_chain()
        assert tree.is_descendant(ProcessIdentity(100), ProcessIdentity(100))

    def test_sibling_trees_unrelated(self):
        tree = build_chain()
        tree.add_root(ProcessIdentity(200), comm="other")
        tree.apply_process_event(pev("proc_fork", 200, 15, child_pid=201))
        assert not tree.is_descendant(ProcessIdentity(201), ProcessIdentity(100))

    def test_unknown_identity_raises(self):
        tree = build_chain()
        with pytest.raises(UnknownIdentity):
            tree.is_descendant(ProcessIdentity(12345), ProcessIdentity(100))


class TestLineagePath:
    def test_full_chain(self):
        tree = build_chain()
        path = tree.lineage_path(ProcessIdentity(102))
        assert [p.pid for p, _ in path] == [102, 101, 100]
        assert path[1][1] == "bash"

    def test_root_is_itself(self):
        tree = build_chain()
        assert [p.pid for p, _ in tree.lineage_path(ProcessIdentity(100))] == [100]

    def test_orphan_path_ends_at_synthetic_root(self):
        tree = LineageTree()
        tree.apply_process_event(pev("proc_fork", 999, 5, child_pid=1000))
        path = tree.lineage_path(ProcessIdentity(1000))
        assert path[-1][0] == UNKNOWN_ROOT


def random_history(rng, n_events=500):
    """Random fork/exec/exit history plus the oracle fork-edge list."""
    tree = LineageTree()
    root = ProcessIdentity(1)
    tree.add_root(root, comm="root")
    alive = [root]
    all_procs = [root]
    edges = {}  # child -> parent, the brute-force oracle's view
    next_pid = 2
    ts = 1
    for _ in range(n_events):
        ts += 1
        op = rng.random()
        if op < 0.5 or len(alive) <= 1:
            parent = rng.choice(alive)
            child = ProcessIdentity(next_pid)
            next_pid += 1
            tree.apply_process_event(
                pev("proc_fork", parent.pid, ts, child_pid=child.pid))
            edges[child] = parent
            alive.append(child)
            all_procs.append(child)
        elif op < 0.8:
            proc = rng.choice(alive)
            tree.apply_process_event(
                pev("proc_exec", proc.pid, ts, filename="/bin/x", argv=["x"]))
        else:
            victim = rng.choice([p for p in alive if p != root])
            alive.remove(victim)
            tree.apply_process_event(
                pev("proc_exit", victim.pid, ts, exit_code=0))
        assert tree.check_acyclic()
    return tree, all_procs, edges


def oracle_is_descendant(edges, a, root):
    """Brute-force transitive closure by walking the recorded fork edges."""
    seen = set()
    cur = a
    while cur is not None and cur not in seen:
        if cur == root:
            return True
        seen.add(cur)
        cur = edges.get(cur)
    return False


class TestRandomHistoryOracle:
    def test_matches_bruteforce_closure(self):
        for seed in range(10):
            rng = random.Random(seed)
            tree, procs, edges = random_history(rng, n_events=200)
            for _ in range(200):
                a, b = rng.choice(procs), rng.choice(procs)
                assert tree.is_descendant(a, b) == oracle_is_descendant(
                    edges, a, b), (seed, a, b)

    def test_alive_iff_no_exit(self):
        rng = random.Random(42)
        tree, procs, _ = random_history(rng, n_events=300)
        exited = {p for p in procs if not tree.nodes[p].alive}
        for p in procs:
            assert tree.nodes[p].alive == (p not in exited)
