/*
  Userspace model of the in-kernel admission filter ("agentsight_filter"
  map) plus a probe-level simulator used to check the filtering
  invariants that the kernel program must uphold:

    - causal closure: every admitted pid is a monitored root or reachable
      from one via recorded fork edges;
    - drop accounting: emitted + dropped equals probe hits on admitted
      pids;
    - no record is ever emitted for a pid that was never admitted.
*/

import { KernelRecord, RecordKind } from "./wire";

export class FilterSet {
  private admittedPids = new Set<number>();
  private roots = new Set<number>();
  // child -> parent, for every fork observed while the parent was
  // admitted; this is the recorded lineage the closure check walks.
  private forkEdges = new Map<number, number>();

  admitRoot(pid: number): void {
    this.admittedPids.add(pid);
    this.roots.add(pid);
  }

  has(pid: number): boolean {
    return this.admittedPids.has(pid);
  }

  /* Fork rule: the child of an admitted parent is admitted. Returns
     whether the fork was admitted (and should be recorded). */
  onFork(parentPid: number, childPid: number): boolean {
    if (!this.admittedPids.has(parentPid)) {
      return false;
    }
    this.admittedPids.add(childPid);
    this.forkEdges.set(childPid, parentPid);
    return true;
  }

  /* Exit rule: remove immediately, preventing stale admission after
     PID reuse. Returns whether the exit was for an admitted pid. */
  onExit(pid: number): boolean {
    if (!this.admittedPids.has(pid)) {
      return false;
    }
    this.admittedPids.delete(pid);
    return true;
  }

  get size(): number {
    return this.admittedPids.size;
  }

  admitted(): number[] {
    return [...this.admittedPids];
  }

  /* Every admitted pid must be a root or reach one through fork edges. */
  checkCausalClosure(): boolean {
    for (const pid of this.admittedPids) {
      let cur: number | undefined = pid;
      const seen = new Set<number>();
      while (cur !== undefined && !seen.has(cur)) {
        if (this.roots.has(cur)) break;
        seen.add(cur);
        cur = this.forkEdges.get(cur);
      }
      if (cur === undefined || seen.has(cur)) {
        return false;
      }
    }
    return true;
  }
}

export type ProbeHit =
  | { kind: "fork"; pid: number; childPid: number }
  | { kind: "exit"; pid: number }
  | {
      kind: "probe"; // any payload-carrying probe: tls, open, io, connect
      pid: number;
      record: RecordKind;
      payload: Uint8Array;
    };

export type SimResult = {
  emitted: KernelRecord[];
  dropped: number;
  admittedHits: number;
};

/*
  Replay a probe-hit history through the filter rules with a bounded
  ring buffer (capacity in records; the kernel drops, never blocks).
  This is the reference semantics the BPF program implements.
*/
export function simulateCapture(
  roots: number[],
  hits: ProbeHit[],
  ringCapacity = Infinity,
): SimResult {
  const filter = new FilterSet();
  for (const r of roots) filter.admitRoot(r);

  const emitted: KernelRecord[] = [];
  let dropped = 0;
  let admittedHits = 0;
  let ringFree = ringCapacity;
  let ts = 1n;

  const emit = (pid: number, kind: RecordKind, payload: Uint8Array) => {
    if (ringFree > 0) {
      ringFree--;
      emitted.push({ ts: ts++, pid, tid: pid, kind, flags: 0, payload });
    } else {
      dropped++;
    }
  };

  for (const hit of hits) {
    if (hit.kind === "fork") {
      if (filter.onFork(hit.pid, hit.childPid)) {
        admittedHits++;
        emit(hit.pid, RecordKind.PROC_FORK, new Uint8Array(0));
      }
    } else if (hit.kind === "exit") {
      if (filter.onExit(hit.pid)) {
        admittedHits++;
        emit(hit.pid, RecordKind.PROC_EXIT, new Uint8Array(0));
      }
    } else {
      if (filter.has(hit.pid)) {
        admittedHits++;
        emit(hit.pid, hit.record, hit.payload);
      }
    }
    if (!filter.checkCausalClosure()) {
      throw new Error("filter lost causal closure");
    }
  }
  return { emitted, dropped, admittedHits };
}
