#!/usr/bin/env python3
"""Regenerate the bundled replay fixtures under fixtures/."""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from agentsight import synth  # noqa: E402
from agentsight.ingestion import write_trace  # noqa: E402

FIXTURES = {
    "injection.jsonl": synth.injection_fixture,
    "benign_build.jsonl": synth.benign_build_fixture,
    "reasoning_loop.jsonl": lambda: synth.reasoning_loop_fixture(5),
    "reasoning_loop_short.jsonl": lambda: synth.reasoning_loop_fixture(2),
    "contention.jsonl": lambda: synth.contention_fixture(4),
}


def main() -> None:
    out_dir = pathlib.Path(__file__).resolve().parents[1] / "fixtures"
    out_dir.mkdir(exist_ok=True)
    for name, make in FIXTURES.items():
        path = out_dir / name
        n = write_trace(str(path), make(), wall_clock_anchor_unix_ns=0)
        print(f"{path}: {n} events")


if __name__ == "__main__":
    main()
