/*
  Ring-buffer record wire codec.

  Every record crossing the kernel/userspace boundary is a little-endian
  header {u64 ts, u32 pid, u32 tid, u16 kind, u16 flags, u32 data_len}
  followed by exactly data_len payload bytes, so records are
  self-delimiting in a byte stream. The layout here must stay in lock
  step with struct record_hdr in ../bpf/agentsight.bpf.c.
*/

export const HEADER_SIZE = 24;
export const MAX_PAYLOAD = 16384;
export const COMM_LEN = 16;

export enum RecordKind {
  TLS_READ = 1,
  TLS_WRITE = 2,
  PROC_FORK = 3,
  PROC_EXEC = 4,
  PROC_EXIT = 5,
  FS_OPEN = 6,
  FS_WRITE = 7,
  FS_READ = 8,
  NET_CONNECT = 9,
  NET_SEND = 10,
}

export enum RecordFlags {
  NONE = 0,
  TRUNCATED = 0x1, // payload cut at the capture limit
  FAULT = 0x2, // a memory read faulted; fields are best-effort
}

export type KernelRecord = {
  ts: bigint; // monotonic nanoseconds
  pid: number;
  tid: number;
  kind: RecordKind;
  flags: number;
  payload: Uint8Array; // length == data_len, <= MAX_PAYLOAD
};

export class WireError extends Error {}

export function encodeRecord(rec: KernelRecord): Uint8Array {
  if (rec.payload.length > MAX_PAYLOAD) {
    throw new WireError(
      `payload ${rec.payload.length} exceeds cap ${MAX_PAYLOAD}`,
    );
  }
  const out = new Uint8Array(HEADER_SIZE + rec.payload.length);
  const view = new DataView(out.buffer);
  view.setBigUint64(0, rec.ts, true);
  view.setUint32(8, rec.pid, true);
  view.setUint32(12, rec.tid, true);
  view.setUint16(16, rec.kind, true);
  view.setUint16(18, rec.flags, true);
  view.setUint32(20, rec.payload.length, true);
  out.set(rec.payload, HEADER_SIZE);
  return out;
}

export function encodeStream(records: KernelRecord[]): Uint8Array {
  const parts = records.map(encodeRecord);
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

export type DecodeResult = {
  records: KernelRecord[];
  // Bytes at the tail that do not yet form a complete record; a stream
  // consumer carries them into the next read.
  remainder: Uint8Array;
};

export function decodeStream(buf: Uint8Array): DecodeResult {
  const records: KernelRecord[] = [];
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let off = 0;
  while (off + HEADER_SIZE <= buf.length) {
    const dataLen = view.getUint32(off + 20, true);
    if (dataLen > MAX_PAYLOAD) {
      throw new WireError(`data_len ${dataLen} exceeds cap ${MAX_PAYLOAD}`);
    }
    if (off + HEADER_SIZE + dataLen > buf.length) {
      break; // incomplete trailing record
    }
    records.push({
      ts: view.getBigUint64(off, true),
      pid: view.getUint32(off + 8, true),
      tid: view.getUint32(off + 12, true),
      kind: view.getUint16(off + 16, true),
      flags: view.getUint16(off + 18, true),
      payload: buf.slice(off + HEADER_SIZE, off + HEADER_SIZE + dataLen),
    });
    off += HEADER_SIZE + dataLen;
  }
  return { records, remainder: buf.slice(off) };
}

// --- per-kind payload layouts (mirroring the probe bodies) ----------

function readCString(payload: Uint8Array, off: number): string {
  let end = off;
  while (end < payload.length && payload[end] !== 0) end++;
  return new TextDecoder().decode(payload.subarray(off, end));
}

function readComm(payload: Uint8Array): string {
  return readCString(payload.subarray(0, COMM_LEN), 0);
}

export type TlsPayload = { fd: number; data: Uint8Array };
export type ForkPayload = { comm: string; childPid: number; childComm: string };
export type ExecPayload = { comm: string; filename: string; argv: string[] };
export type ExitPayload = { comm: string; exitCode: number };
export type OpenPayload = { comm: string; fd: number; path: string };
export type IoPayload = { comm: string; fd: number; len: number };
export type ConnectPayload = { comm: string; addr: string; port: number };

function dv(payload: Uint8Array): DataView {
  return new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
}

export function decodeTls(payload: Uint8Array): TlsPayload {
  return {
    fd: dv(payload).getInt32(0, true),
    data: payload.slice(4),
  };
}

export function decodeFork(payload: Uint8Array): ForkPayload {
  return {
    comm: readComm(payload),
    childPid: dv(payload).getUint32(COMM_LEN, true),
    childComm: readCString(
      payload.subarray(COMM_LEN + 4, COMM_LEN + 4 + COMM_LEN),
      0,
    ),
  };
}

export function decodeExec(payload: Uint8Array): ExecPayload {
  const argc = dv(payload).getUint16(COMM_LEN, true);
  const strings: string[] = [];
  let off = COMM_LEN + 2;
  for (let i = 0; i < argc && off < payload.length; i++) {
    const s = readCString(payload, off);
    strings.push(s);
    off += s.length + 1;
  }
  // First string is the resolved filename; the rest is argv. A record
  // from the exec tracepoint carries only the filename, in which case
  // argv defaults to [basename(filename)].
  const filename = strings[0] ?? "";
  const argv = strings.slice(1);
  if (argv.length === 0 && filename) {
    argv.push(filename.split("/").pop() ?? filename);
  }
  return { comm: readComm(payload), filename, argv };
}

export function decodeExit(payload: Uint8Array): ExitPayload {
  return {
    comm: readComm(payload),
    exitCode: dv(payload).getInt32(COMM_LEN, true),
  };
}

export function decodeOpen(payload: Uint8Array): OpenPayload {
  return {
    comm: readComm(payload),
    fd: dv(payload).getInt32(COMM_LEN, true),
    path: readCString(payload, COMM_LEN + 4),
  };
}

export function decodeIo(payload: Uint8Array): IoPayload {
  const view = dv(payload);
  return {
    comm: readComm(payload),
    fd: view.getInt32(COMM_LEN, true),
    len: view.getUint32(COMM_LEN + 4, true),
  };
}

export function decodeConnect(payload: Uint8Array): ConnectPayload {
  const view = dv(payload);
  const addr = [
    payload[COMM_LEN],
    payload[COMM_LEN + 1],
    payload[COMM_LEN + 2],
    payload[COMM_LEN + 3],
  ].join(".");
  return {
    comm: readComm(payload),
    addr,
    port: view.getUint16(COMM_LEN + 4, true),
  };
}

// --- payload builders (used by tests and the replay harness) --------

function cstring(s: string, fixed?: number): Uint8Array {
  const bytes = new TextEncoder().encode(s);
  const out = new Uint8Array(fixed ?? bytes.length + 1);
  out.set(bytes.subarray(0, out.length - 1));
  return out;
}

function concat(...parts: Uint8Array[]): Uint8Array {
  const out = new Uint8Array(parts.reduce((n, p) => n + p.length, 0));
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function u32le(n: number): Uint8Array {
  const out = new Uint8Array(4);
  new DataView(out.buffer).setUint32(0, n >>> 0, true);
  return out;
}

function u16le(n: number): Uint8Array {
  const out = new Uint8Array(2);
  new DataView(out.buffer).setUint16(0, n, true);
  return out;
}

export function buildTls(fd: number, data: Uint8Array): Uint8Array {
  return concat(u32le(fd), data);
}

export function buildFork(
  comm: string,
  childPid: number,
  childComm: string,
): Uint8Array {
  return concat(
    cstring(comm, COMM_LEN),
    u32le(childPid),
    cstring(childComm, COMM_LEN),
  );
}

export function buildExec(
  comm: string,
  filename: string,
  argv: string[],
): Uint8Array {
  const strings = [filename, ...argv].map((s) => cstring(s));
  return concat(cstring(comm, COMM_LEN), u16le(strings.length), ...strings);
}

export function buildExit(comm: string, exitCode: number): Uint8Array {
  return concat(cstring(comm, COMM_LEN), u32le(exitCode >>> 0));
}

export function buildOpen(
  comm: string,
  fd: number,
  path: string,
): Uint8Array {
  return concat(cstring(comm, COMM_LEN), u32le(fd >>> 0), cstring(path));
}

export function buildIo(comm: string, fd: number, len: number): Uint8Array {
  return concat(cstring(comm, COMM_LEN), u32le(fd >>> 0), u32le(len));
}

export function buildConnect(
  comm: string,
  addr: string,
  port: number,
): Uint8Array {
  const octets = addr.split(".").map((o) => parseInt(o, 10));
  return concat(cstring(comm, COMM_LEN), new Uint8Array(octets), u16le(port));
}
