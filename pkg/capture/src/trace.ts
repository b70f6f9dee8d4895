/*
  KernelRecord -> JSONL trace conversion.

  Output is the replay trace format the analysis pipeline ingests: a
  trace_header line followed by one JSON object per event with fields
  ts, seq, pid, tid, comm, kind, data. TLS plaintext rides as base64 in
  data.payload_b64.
*/

import {
  decodeConnect,
  decodeExec,
  decodeExit,
  decodeFork,
  decodeIo,
  decodeOpen,
  decodeTls,
  KernelRecord,
  RecordFlags,
  RecordKind,
} from "./wire";

export const TRACE_VERSION = 1;

const KIND_NAMES: Record<number, string> = {
  [RecordKind.TLS_READ]: "tls_read",
  [RecordKind.TLS_WRITE]: "tls_write",
  [RecordKind.PROC_FORK]: "proc_fork",
  [RecordKind.PROC_EXEC]: "proc_exec",
  [RecordKind.PROC_EXIT]: "proc_exit",
  [RecordKind.FS_OPEN]: "fs_open",
  [RecordKind.FS_WRITE]: "fs_write",
  [RecordKind.FS_READ]: "fs_read",
  [RecordKind.NET_CONNECT]: "net_connect",
  [RecordKind.NET_SEND]: "net_send",
};

export function kindName(kind: RecordKind): string {
  const name = KIND_NAMES[kind];
  if (!name) throw new Error(`unknown record kind ${kind}`);
  return name;
}

type EventObj = {
  ts: number;
  seq: number;
  pid: number;
  tid: number;
  comm: string;
  kind: string;
  data: Record<string, unknown>;
};

/*
  TLS records carry no comm (the probe fires below the layer where we
  track it), so the converter remembers the last comm seen per pid from
  lifecycle/syscall records and backfills.
*/
export function recordToEvent(
  rec: KernelRecord,
  seq: number,
  commCache: Map<number, string>,
): EventObj {
  const truncated = (rec.flags & RecordFlags.TRUNCATED) !== 0;
  let comm = "";
  let data: Record<string, unknown>;

  switch (rec.kind) {
    case RecordKind.TLS_READ:
    case RecordKind.TLS_WRITE: {
      const p = decodeTls(rec.payload);
      comm = commCache.get(rec.pid) ?? "";
      data = {
        payload_b64: Buffer.from(p.data).toString("base64"),
        len: p.data.length,
        truncated,
        fd: p.fd,
      };
      break;
    }
    case RecordKind.PROC_FORK: {
      const p = decodeFork(rec.payload);
      comm = p.comm;
      data = { child_pid: p.childPid, child_comm: p.childComm };
      break;
    }
    case RecordKind.PROC_EXEC: {
      const p = decodeExec(rec.payload);
      comm = p.comm;
      data = { filename: p.filename, argv: p.argv };
      break;
    }
    case RecordKind.PROC_EXIT: {
      const p = decodeExit(rec.payload);
      comm = p.comm;
      data = { exit_code: p.exitCode };
      break;
    }
    case RecordKind.FS_OPEN: {
      const p = decodeOpen(rec.payload);
      comm = p.comm;
      data = { path: p.path, fd: p.fd };
      break;
    }
    case RecordKind.FS_WRITE:
    case RecordKind.FS_READ: {
      const p = decodeIo(rec.payload);
      comm = p.comm;
      data = { fd: p.fd, len: p.len };
      break;
    }
    case RecordKind.NET_CONNECT: {
      const p = decodeConnect(rec.payload);
      comm = p.comm;
      data = { addr: p.addr, port: p.port };
      break;
    }
    case RecordKind.NET_SEND: {
      const p = decodeIo(rec.payload); // same layout: fd unused, len
      comm = p.comm;
      data = { addr: "", port: 0, len: p.len };
      break;
    }
    default:
      throw new Error(`unknown record kind ${rec.kind}`);
  }

  if (comm) commCache.set(rec.pid, comm);
  return {
    ts: Number(rec.ts),
    seq,
    pid: rec.pid,
    tid: rec.tid,
    comm,
    kind: kindName(rec.kind),
    data,
  };
}

export function recordsToTraceLines(
  records: KernelRecord[],
  wallClockAnchorUnixNs = 0,
): string[] {
  const lines = [
    JSON.stringify({
      kind: "trace_header",
      version: TRACE_VERSION,
      wall_clock_anchor_unix_ns: wallClockAnchorUnixNs,
    }),
  ];
  const commCache = new Map<number, string>();
  records.forEach((rec, i) => {
    lines.push(JSON.stringify(recordToEvent(rec, i + 1, commCache)));
  });
  return lines;
}
