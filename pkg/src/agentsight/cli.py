"""Operator surface: record live traces, replay them through the
pipeline, and render reports.

Exit codes: 0 success (no critical finding), 1 error, 2 insufficient
privilege, 3 critical finding present (for CI gating).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import subprocess
import sys
from dataclasses import dataclass, field, fields

from . import analyzers
from .correlation import MAX_WINDOW_NS, MIN_WINDOW_NS
from .events import SchemaMismatch
from .ingestion import MalformedLine
from .observer import HttpBackend, ObserverClient
from .pipeline import replay

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PRIVILEGE = 2
EXIT_CRITICAL = 3

CREDENTIAL_ENV = "AGENTSIGHT_OBSERVER_API_KEY"


class InsufficientPrivilege(Exception):
    pass


class TargetNotFound(Exception):
    pass


@dataclass
class RunConfig:
    mode: str = ""
    pid: int | None = None
    cmd: str | None = None
    trace: str | None = None
    window_ms: int = 200
    loop_threshold: int = analyzers.DEFAULT_LOOP_THRESHOLD
    contention_threshold: int = analyzers.DEFAULT_CONTENTION_THRESHOLD
    sensitive_paths: tuple[str, ...] = analyzers.DEFAULT_SENSITIVE_PATHS
    observer_endpoint: str = ""
    observer_model: str = ""
    observer_off: bool = True
    out_trace: str | None = None
    out_report: str | None = None

    def validate(self) -> None:
        if self.mode not in ("record", "replay", "analyze"):
            raise ValueError(f"invalid mode {self.mode!r}")
        if not MIN_WINDOW_NS <= self.window_ms * 1_000_000 <= MAX_WINDOW_NS:
            raise ValueError(
                f"--window-ms must be within 100-500, got {self.window_ms}")


def load_config_file(path: str) -> dict:
    """Simple key-value config: one `key = value` per line, # comments."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.strip()!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    file_values = load_config_file(args.config) if args.config else {}
    valid = {f.name for f in fields(RunConfig)}
    for key, value in file_values.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if key == "sensitive_paths":
            value = tuple(p.strip() for p in value.split(",") if p.strip())
        elif isinstance(current, bool):
            value = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int) or key == "pid":
            value = int(value)
        setattr(cfg, key, value)

    # Flags win over the config file.
    for key in valid - {"sensitive_paths", "observer_off"}:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            setattr(cfg, key, flag_value)
    if args.sensitive_paths is not None:
        cfg.sensitive_paths = tuple(
            p.strip() for p in args.sensitive_paths.split(",") if p.strip())
    if args.observer_endpoint:
        cfg.observer_off = False
    if args.observer_off:
        cfg.observer_off = True
    cfg.validate()
    return cfg


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="agentsight",
        description="Boundary-tracing observability for LLM agents.")
    p.add_argument("--mode", choices=("record", "replay", "analyze"))
    p.add_argument("--pid", type=int, help="existing process to monitor")
    p.add_argument("--cmd", help="command to spawn as the monitored root")
    p.add_argument("--trace", help="trace file (input for replay/analyze, "
                                   "output for record)")
    p.add_argument("--window-ms", type=int, dest="window_ms",
                   help="temporal correlation window (100-500 ms)")
    p.add_argument("--loop-threshold", type=int, dest="loop_threshold")
    p.add_argument("--contention-threshold", type=int,
                   dest="contention_threshold")
    p.add_argument("--sensitive-paths", dest="sensitive_paths",
                   help="comma-separated path patterns")
    p.add_argument("--observer-endpoint", dest="observer_endpoint")
    p.add_argument("--observer-model", dest="observer_model")
    p.add_argument("--observer-off", dest="observer_off", action="store_true",
                   default=False)
    p.add_argument("--out-trace", dest="out_trace")
    p.add_argument("--out-report", dest="out_report")
    p.add_argument("--config", help="key=value config file (flags win)")
    return p


def cmd_record(cfg: RunConfig) -> int:
    """Record a live trace via the kernel collector (requires root)."""
    if cfg.pid is not None and not os.path.exists(f"/proc/{cfg.pid}"):
        raise TargetNotFound(f"no such process: {cfg.pid}")
    if cfg.pid is None and not cfg.cmd:
        raise TargetNotFound("record needs --pid or --cmd")
    if os.geteuid() != 0:
        raise InsufficientPrivilege(
            "loading the kernel collectors requires root")
    collector = os.environ.get("AGENTSIGHT_COLLECTOR") or shutil.which(
        "agentsight-collector")
    if collector is None:
        raise InsufficientPrivilege(
            "kernel collector not found (set AGENTSIGHT_COLLECTOR or install "
            "the capture component)")
    out = cfg.trace or "agentsight-trace.jsonl"
    argv = [collector, "--out", out]
    if cfg.pid is not None:
        argv += ["--pid", str(cfg.pid)]
    else:
        argv += ["--cmd", cfg.cmd]
    proc = subprocess.run(argv)
    return EXIT_OK if proc.returncode == 0 else EXIT_ERROR


def cmd_replay(cfg: RunConfig) -> int:
    from .correlation import trace_to_json

    if not cfg.trace:
        raise ValueError("replay needs --trace")
    observer_client = None
    if not cfg.observer_off and cfg.observer_endpoint:
        backend = HttpBackend(cfg.observer_endpoint, cfg.observer_model,
                              credential_env=CREDENTIAL_ENV)
        observer_client = ObserverClient(backend)

    result = replay(
        cfg.trace,
        window_ns=cfg.window_ms * 1_000_000,
        loop_threshold=cfg.loop_threshold,
        contention_threshold=cfg.contention_threshold,
        sensitive_paths=tuple(cfg.sensitive_paths),
        observer_client=observer_client,
    )

    trace_json = trace_to_json(result.trace)
    report_json = json.dumps(result.report_obj(), sort_keys=True,
                             separators=(",", ":")) + "\n"
    if cfg.out_trace:
        with open(cfg.out_trace, "w", encoding="utf-8") as fh:
            fh.write(trace_json)
    if cfg.out_report:
        with open(cfg.out_report, "w", encoding="utf-8") as fh:
            fh.write(report_json)
    summary = result.report_obj()["summary"]
    print(f"replayed {result.events_processed} events -> "
          f"{summary['merged_item_count']} items, "
          f"{len(result.findings)} findings "
          f"({summary['critical_findings']} critical)")
    return EXIT_CRITICAL if result.has_critical else EXIT_OK


def render_report(trace_obj: dict, report_obj: dict | None = None) -> str:
    """Plain-text timeline over the replay outputs; stable ordering."""
    if not isinstance(trace_obj, dict) or "items" not in trace_obj \
            or "header" not in trace_obj:
        raise SchemaMismatch("not a causal trace JSON document")
    items = trace_obj["items"]
    intents = [i for i in items if i.get("type") == "intent"]
    actions = [i for i in items if i.get("type") != "intent"]
    lines = [f"{len(intents)} intents, {len(actions)} actions "
             f"(raw events: {trace_obj['header']['raw_event_count']}, "
             f"merged items: {trace_obj['header']['merged_item_count']})"]
    base_ts = items[0]["first_ts"] if items else 0
    for item in items:
        off_ms = (item["first_ts"] - base_ts) / 1e6
        payload = item.get("payload", {})
        chain = payload.get("lineage") or []
        chain_text = " <- ".join(f"{comm or '?'}({pid})" for pid, comm in chain)
        if item.get("type") == "intent":
            calls = "; ".join(f"{n}({a})" for n, a in payload.get("tool_calls", []))
            text = (payload.get("response_text") or "").replace("\n", " ")
            if len(text) > 120:
                text = text[:120] + "..."
            lines.append(
                f"  [{item['id']}] +{off_ms:9.1f}ms intent "
                f"{payload.get('endpoint', '')} {chain_text}\n"
                f"        response: {text!r}"
                + (f"\n        tool_calls: {calls}" if calls else ""))
        else:
            count = f" x{item.get('count', 1)}" if item.get("count", 1) > 1 else ""
            linked = ",".join(str(l["intent_id"]) for l in item.get("links", []))
            failed = " FAILED" if payload.get("failed") else ""
            lines.append(
                f"  [{item['id']}] +{off_ms:9.1f}ms {item.get('kind')}{count} "
                f"{json.dumps(payload.get('data', {}), sort_keys=True)}"
                f"{failed} {chain_text}"
                + (f" linked_to={linked}" if linked else ""))
    if report_obj:
        lines.append("findings:")
        for f in report_obj.get("findings", []):
            lines.append(f"  {f['severity'].upper()} {f['kind']}: "
                         f"{f['explanation']} (evidence {f['evidence']})")
        for v in report_obj.get("verdicts", []):
            lines.append(f"verdict: {v['verdict_label']} "
                         f"risk={v['risk_score']:.2f} {v['rationale']}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig) -> int:
    if not cfg.trace:
        raise ValueError("analyze needs --trace (a replay trace JSON)")
    try:
        with open(cfg.trace, "r", encoding="utf-8") as fh:
            trace_obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"invalid JSON: {exc}") from exc
    report_obj = None
    if cfg.out_report and os.path.exists(cfg.out_report):
        with open(cfg.out_report, "r", encoding="utf-8") as fh:
            report_obj = json.load(fh)
    sys.stdout.write(render_report(trace_obj, report_obj))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        if cfg.mode == "record":
            return cmd_record(cfg)
        if cfg.mode == "replay":
            return cmd_replay(cfg)
        return cmd_report(cfg)
    except InsufficientPrivilege as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except TargetNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except MalformedLine as exc:
        print(f"error: line {exc.lineno}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
