#!/usr/bin/env python3
"""hybridmesh command line: run, replay-verify, serve, explain.

Exit codes: 0 success, 2 run failed, 3 config error (or the listen address is
taken), 4 replay found violations or the log is corrupt.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import Any

from core import ConfigError, HybridMeshError, canonical_json
from metadata_repo import engine_repository
from replay import CorruptLog, replay_verify
from scenario import ScenarioConfig, WorkflowMode, load_scenario
from settings import TOOL_NAME, TOOL_VERSION, Settings, append_text, configure_logging, load_settings_from_env
from tes_layer import Gateway, TesNode
from wire import LiveRuntime, check_bind, create_repo_app, create_tes_app
from wire_client import RemoteTesEndpoint, WireConfig
from workflow import GATEWAY_ID, RunReport, RunResult, build_world, prepare, run_scenario

log = logging.getLogger(TOOL_NAME)

EXIT_OK = 0
EXIT_RUN_FAILED = 2
EXIT_CONFIG = 3
EXIT_REPLAY = 4


def metrics_doc(report: RunReport, *, event_log_digest: str, config_digest: str) -> dict[str, Any]:
    doc = report.to_dict()
    doc["event_log_digest"] = event_log_digest
    doc["config_digest"] = config_digest
    doc["tool_version"] = TOOL_VERSION
    return doc


def write_outputs(out_dir: Path, result: RunResult, config: ScenarioConfig) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    engine = result.engine
    report = result.report
    paths = {
        "events": engine.log.write(out_dir / "events.ndjson"),
        "metrics": out_dir / "metrics.json",
        "manifest": out_dir / "manifest.json",
        "timeline": out_dir / "timeline.csv",
        "effective": out_dir / "effective_scenario.json",
    }
    doc = metrics_doc(report, event_log_digest=engine.log.digest(), config_digest=config.digest())
    paths["metrics"].write_text(canonical_json(doc) + "\n", encoding="utf-8")
    paths["manifest"].write_text(canonical_json(report.final_manifest.to_dict()) + "\n", encoding="utf-8")
    paths["timeline"].write_text(report.timeline_csv(), encoding="utf-8")
    paths["effective"].write_text(config.effective_json() + "\n", encoding="utf-8")
    return paths


def _error(settings: Settings, message: str) -> None:
    log.error("%s", message)
    ts = dt.datetime.now().isoformat(timespec="seconds")
    append_text(settings.out_dir / "errors.log", f"{ts} {message}")


def _load(args: argparse.Namespace) -> ScenarioConfig:
    config = load_scenario(args.scenario)
    if args.seed is not None or args.mode is not None:
        config = config.with_overrides(seed=args.seed, mode=args.mode)
    return config


def cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    try:
        config = _load(args)
        ctx = prepare(config)
    except ConfigError as e:
        _error(settings, f"config: {e}")
        return EXIT_CONFIG

    try:
        result = run_scenario(config, ctx=ctx)
    except HybridMeshError as e:
        partial = ctx.engine.log.write(settings.out_dir / "events.ndjson")
        _error(settings, f"run aborted: {type(e).__name__}: {e} (partial log {partial})")
        return EXIT_RUN_FAILED

    paths = write_outputs(settings.out_dir, result, config)
    report = result.report
    print(
        f"{report.mode.value}: succeeded={report.succeeded} makespan={report.makespan_s:.3f}s "
        f"bytes={report.bytes_transferred_total} retries={report.retries}"
    )
    print(f"metrics: {paths['metrics']}")
    if not report.succeeded:
        _error(
            settings,
            f"run failed: failed_batches={report.failed_batches} starved={report.starved}",
        )
        return EXIT_RUN_FAILED
    return EXIT_OK


def cmd_replay_verify(args: argparse.Namespace, settings: Settings) -> int:
    try:
        verdict = replay_verify(args.events)
    except CorruptLog as e:
        _error(settings, f"corrupt log: {e}")
        return EXIT_REPLAY
    print(json.dumps(verdict.to_dict(), ensure_ascii=False, indent=2))
    if not verdict.ok:
        _error(settings, f"replay of {args.events}: {len(verdict.violations)} violation(s)")
        return EXIT_REPLAY
    return EXIT_OK


def _explain_rows(result: RunResult) -> tuple[list[str], list[list[str]]]:
    report = result.report
    if report.routing_decisions:
        header = ["task_id", "chosen_node", "cost_bytes_remote", "cost_model", "alternatives"]
        rows = [
            [
                d["task_id"],
                d["chosen_node"],
                str(d["cost_bytes_remote"]),
                d["cost_model"],
                " ".join(f"{node}={cost:g}" for node, cost in d["alternatives"]),
            ]
            for d in report.routing_decisions
        ]
        return header, rows
    header = ["task_id", "router", "placement", "target", "node_count", "executor_count"]
    rows = [[str(p.get(k, "")) for k in header] for p in report.placements]
    return header, rows


def cmd_explain(args: argparse.Namespace, settings: Settings) -> int:
    try:
        config = _load(args)
    except ConfigError as e:
        _error(settings, f"config: {e}")
        return EXIT_CONFIG
    try:
        result = run_scenario(config)
    except HybridMeshError as e:
        _error(settings, f"run aborted: {type(e).__name__}: {e}")
        return EXIT_RUN_FAILED
    header, rows = _explain_rows(result)
    if not rows:
        print(f"no routing decisions or placements in a {result.report.mode.value} run")
        return EXIT_OK
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return EXIT_OK


def build_app(config: ScenarioConfig, component: str, *, site: str | None = None) -> Any:
    """FastAPI app for one served component, on a wall-clock engine built from the scenario."""
    world = build_world(config)
    runtime = LiveRuntime(world.engine)
    if component == "repo":
        return create_repo_app(engine_repository(world.engine, max_retries=config.max_retries), runtime)
    if component == "node":
        if site is None or site not in world.site_backends:
            raise ConfigError(f"serve node needs --site, one of {sorted(world.site_backends)}")
        node = TesNode(site, backend=world.site_backends[site], engine=world.engine, common_site=world.common_site)
        return create_tes_app(node, runtime)

    gateway = Gateway(
        GATEWAY_ID,
        engine=world.engine,
        cost_model=config.cost_model,
        heartbeat_interval_s=config.heartbeat_interval_s,
        heartbeat_timeout_s=config.heartbeat_timeout_s,
        seed=config.seed,
    )
    if config.endpoints:
        for ep in config.endpoints:
            sites = frozenset(ep.sites) if ep.sites else None
            gateway.register(RemoteTesEndpoint(ep.node_id, WireConfig(base_url=ep.url), sites=sites))
    else:
        for s in sorted(world.site_backends):
            gateway.register(
                TesNode(s, backend=world.site_backends[s], engine=world.engine, common_site=world.common_site)
            )
    return create_tes_app(gateway, runtime)


def cmd_serve(args: argparse.Namespace, settings: Settings) -> int:
    try:
        import uvicorn
    except ImportError as exc:  # pragma: no cover - dependency check
        raise SystemExit("uvicorn is required. Install with: pip install -r requirements.txt") from exc

    host = args.host or settings.host
    port = args.port or settings.port
    try:
        config = _load(args)
        app = build_app(config, args.component, site=args.site)
        check_bind(host, port)
    except HybridMeshError as e:
        # also BindError, and NodeUnreachable for an endpoint declared without sites
        _error(settings, f"serve {args.component}: {e}")
        return EXIT_CONFIG
    log.info("serving %s on %s:%d", args.component, host, port)
    uvicorn.run(app, host=host, port=port, log_level=settings.log_level.lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="Hybrid/multi-cloud execution architectures, simulated.")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", required=True, help="Scenario file (.toml, or an effective_scenario.json)")
        p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
        p.add_argument("--mode", choices=[m.value for m in WorkflowMode], default=None, help="Override workflow.mode")
        p.add_argument("--out-dir", default="results", help="Output folder (HYBRIDMESH_OUT_DIR wins)")

    p_run = sub.add_parser("run", help="Simulate one scenario and write metrics and the event log")
    scenario_flags(p_run)

    p_replay = sub.add_parser("replay-verify", help="Re-check invariants from an events.ndjson file")
    p_replay.add_argument("events", help="Path to events.ndjson")
    p_replay.add_argument("--out-dir", default="results")

    p_serve = sub.add_parser("serve", help="Serve a node, gateway or metadata repository over HTTP")
    p_serve.add_argument("component", choices=["node", "gateway", "repo"])
    scenario_flags(p_serve)
    p_serve.add_argument("--site", default=None, help="Site served by a node")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)

    p_explain = sub.add_parser("explain", help="Print the routing decisions (or overflow placements) of a run")
    scenario_flags(p_explain)
    return parser


COMMANDS = {
    "run": cmd_run,
    "replay-verify": cmd_replay_verify,
    "serve": cmd_serve,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = load_settings_from_env(out_dir=args.out_dir)
    configure_logging(settings.log_level)
    return COMMANDS[args.command](args, settings)


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
