"""Process ancestry forest built from fork/exec/exit events.

Dead nodes are retained for the whole session so that actions of
short-lived children can still be attributed after they exit. Forks whose
parent was never seen are tolerated: the child is parked under a synthetic
"unknown" root and flagged, so losing events degrades instead of
corrupting the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .events import BoundaryEvent, ProcessIdentity

# Sentinel parent for processes whose real parent was never observed.
UNKNOWN_ROOT = ProcessIdentity(pid=0x7FFFFFFF, start_ts=0)


class LineageError(Exception):
    pass


class UnknownIdentity(LineageError):
    pass


class DuplicateBirth(LineageError):
    """The same (pid, start_ts) identity was born twice."""


@dataclass(slots=True)
class ProcessNode:
    identity: ProcessIdentity
    parent: ProcessIdentity | None
    comm: str = ""
    exec_history: list[tuple[int, str, list[str]]] = field(default_factory=list)
    alive: bool = True
    orphan: bool = False
    exit_code: int | None = None
    birth_ts: int = 0


class LineageTree:
    """Live ancestry forest rooted at monitored agent processes.

    Single-writer: only the correlation worker mutates it. Parent edges
    are acyclic by construction (a child is always inserted fresh, under
    an existing node).
    """

    def __init__(self) -> None:
        self.nodes: dict[ProcessIdentity, ProcessNode] = {
            UNKNOWN_ROOT: ProcessNode(UNKNOWN_ROOT, None, comm="<unknown>",
                                      alive=False)
        }
        self.roots: set[ProcessIdentity] = set()
        # Parent edges never change once a node exists, so root lookups
        # can be memoized safely.
        self._root_cache: dict[ProcessIdentity, ProcessIdentity] = {}

    def add_root(self, identity: ProcessIdentity, comm: str = "",
                 ts: int = 0) -> ProcessNode:
        node = self.nodes.get(identity)
        if node is None:
            node = ProcessNode(identity, None, comm=comm, birth_ts=ts)
            self.nodes[identity] = node
        self.roots.add(identity)
        return node

    def ensure_known(self, identity: ProcessIdentity, comm: str = "",
                     ts: int = 0) -> ProcessNode:
        """Register a process first seen mid-lifecycle as a monitored root."""
        node = self.nodes.get(identity)
        if node is not None:
            return node
        return self.add_root(identity, comm, ts)

    def apply_process_event(self, ev: BoundaryEvent) -> ProcessNode:
        """Apply one proc_fork / proc_exec / proc_exit event."""
        if ev.kind == "proc_fork":
            child = ProcessIdentity(ev.data["child_pid"],
                                    ev.data.get("child_start", 0))
            if child in self.nodes:
                raise DuplicateBirth(f"{child} born twice")
            parent = ev.proc
            orphan = parent not in self.nodes
            if orphan:
                parent = UNKNOWN_ROOT
            node = ProcessNode(child, parent, comm=ev.data.get("child_comm", ev.comm),
                               orphan=orphan, birth_ts=ev.ts)
            self.nodes[child] = node
            return node
        if ev.kind == "proc_exec":
            node = self.ensure_known(ev.proc, ev.comm, ev.ts)
            argv = list(ev.data.get("argv", []))
            node.exec_history.append((ev.ts, ev.data["filename"], argv))
            node.comm = argv[0].rsplit("/", 1)[-1] if argv else \
                ev.data["filename"].rsplit("/", 1)[-1]
            return node
        if ev.kind == "proc_exit":
            node = self.ensure_known(ev.proc, ev.comm, ev.ts)
            node.alive = False
            code = ev.data.get("exit_code")
            if isinstance(code, int):
                node.exit_code = code
            return node
        raise LineageError(f"not a process event: {ev.kind}")

    def is_descendant(self, a: ProcessIdentity, root: ProcessIdentity) -> bool:
        """True iff following parent edges from ``a`` reaches ``root``.

        A node counts as its own ancestor. Raises UnknownIdentity if either
        identity was never seen.
        """
        if a not in self.nodes or root not in self.nodes:
            raise UnknownIdentity(f"{a if a not in self.nodes else root}")
        cur: ProcessIdentity | None = a
        while cur is not None:
            if cur == root:
                return True
            cur = self.nodes[cur].parent
        return False

    def root_of(self, a: ProcessIdentity) -> ProcessIdentity:
        """The monitored (or synthetic) root at the top of ``a``'s chain."""
        cached = self._root_cache.get(a)
        if cached is not None:
            return cached
        if a not in self.nodes:
            raise UnknownIdentity(str(a))
        path = []
        cur = a
        while True:
            cached = self._root_cache.get(cur)
            if cached is not None:
                cur = cached
                break
            parent = self.nodes[cur].parent
            if parent is None:
                break
            path.append(cur)
            cur = parent
        for p in path:
            self._root_cache[p] = cur
        self._root_cache[a] = cur
        return cur

    def lineage_path(self, a: ProcessIdentity) -> list[tuple[ProcessIdentity, str]]:
        """Chain of (identity, comm) from ``a`` up to its root (length >= 1)."""
        if a not in self.nodes:
            raise UnknownIdentity(str(a))
        path = []
        cur: ProcessIdentity | None = a
        while cur is not None:
            node = self.nodes[cur]
            path.append((cur, node.comm))
            cur = node.parent
        return path

    def check_acyclic(self) -> bool:
        """Walk every parent chain with a visited set; True iff no cycle."""
        for start in self.nodes:
            seen = set()
            cur: ProcessIdentity | None = start
            while cur is not None:
                if cur in seen:
                    return False
                seen.add(cur)
                cur = self.nodes[cur].parent
        return True
