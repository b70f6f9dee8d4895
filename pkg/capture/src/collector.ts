/*
  Userspace collector entry point.

  Live mode (loading ../bpf/agentsight.bpf.o and consuming the ring
  buffer) requires root and a BPF loader; see ../scripts/load_smoke.sh.
  This entry point handles the portable half: converting a captured
  binary record stream into the JSONL trace format the analysis
  pipeline replays.

    usage: node collector.js <records.bin> <out.jsonl>
*/

import { readFileSync, writeFileSync } from "fs";

import { decodeStream } from "./wire";
import { recordsToTraceLines } from "./trace";

export function convertFile(inPath: string, outPath: string): number {
  const raw = readFileSync(inPath);
  const { records, remainder } = decodeStream(new Uint8Array(raw));
  if (remainder.length > 0) {
    process.stderr.write(
      `warning: ${remainder.length} trailing bytes ignored\n`,
    );
  }
  writeFileSync(outPath, recordsToTraceLines(records).join("\n") + "\n");
  return records.length;
}

function main(argv: string[]): number {
  if (argv.length !== 2) {
    process.stderr.write("usage: collector <records.bin> <out.jsonl>\n");
    return 1;
  }
  const n = convertFile(argv[0], argv[1]);
  process.stderr.write(`converted ${n} records\n`);
  return 0;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
