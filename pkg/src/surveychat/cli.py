"""Command-line entry points: serve the daemon, drive simulations, verify
reports, and export transcripts offline."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .backend import LiveBackend, MockBackend
from .config import load_secrets, load_study_config
from .errors import SurveyChatError
from .service import create_app
from .simulator import (
    SimReport,
    export_cli,
    load_sim_script_file,
    run_simulation,
    verify_report,
)
from .store import TranscriptStore

logger = logging.getLogger("surveychat.cli")

CONFIG_ENV = "SURVEYCHAT_CONFIG"
SECRETS_ENV = "SURVEYCHAT_SECRETS"
DB_ENV = "SURVEYCHAT_DB"
LISTEN_ENV = "SURVEYCHAT_LISTEN"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surveychat")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the chat middleware daemon")
    serve.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                       help=f"study config JSON (or ${CONFIG_ENV})")
    serve.add_argument("--secrets", default=os.environ.get(SECRETS_ENV),
                       help=f"secrets JSON (or ${SECRETS_ENV} / env overrides)")
    serve.add_argument("--db", default=os.environ.get(DB_ENV),
                       help=f"transcript database path (or ${DB_ENV})")
    serve.add_argument("--listen", default=os.environ.get(LISTEN_ENV, "127.0.0.1:8000"),
                       help=f"addr:port to bind (or ${LISTEN_ENV})")
    serve.add_argument("--allow-origin", action="append", default=[],
                       help="origin allowed to call the API cross-origin (repeatable)")
    serve.add_argument("--backend", choices=["mock", "live", "config"], default="config",
                       help="override the study's backend kind")
    serve.add_argument("--assets", default=None,
                       help="directory of static widget assets (default: bundled)")
    serve.add_argument("--log-level", default="info",
                       choices=["debug", "info", "warning", "error"])

    simulate = sub.add_parser("simulate", help="drive scripted sessions against a daemon")
    simulate.add_argument("--script", required=True, help="simulation script JSON")
    simulate.add_argument("--target", required=True, help="base URL of the daemon")
    simulate.add_argument("--concurrency", type=int, default=10)
    simulate.add_argument("--out", required=True, help="where to write the report JSON")
    simulate.add_argument("--live-i-understand-costs", action="store_true",
                          help="allow simulating against a daemon with a live backend")

    verify = sub.add_parser("verify", help="check a simulation report against an export")
    verify.add_argument("--report", required=True, help="report JSON from simulate")
    verify.add_argument("--export", required=True, help="per-turn CSV export")

    export = sub.add_parser("export", help="write a CSV export straight from the database")
    export.add_argument("--db", required=True)
    export.add_argument("--shape", required=True, choices=["turns", "conversations"])
    export.add_argument("--out", required=True)

    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if not args.config:
        print("serve: --config (or SURVEYCHAT_CONFIG) is required", file=sys.stderr)
        return 2
    if not args.db:
        print("serve: --db (or SURVEYCHAT_DB) is required", file=sys.stderr)
        return 2

    config = load_study_config(args.config)
    secrets = load_secrets(args.secrets)
    store = TranscriptStore(args.db)

    backend_kind = args.backend if args.backend != "config" else config.backend.kind
    if backend_kind == "mock":
        backend = MockBackend()
    else:
        backend = LiveBackend(config.backend, secrets)

    app = create_app(
        config, secrets, store, backend,
        allow_origins=args.allow_origin,
        assets_dir=args.assets,
    )
    host, _, port = args.listen.rpartition(":")
    logger.info("serving study %s on %s (backend=%s)", config.study_id, args.listen, backend_kind)
    # access_log would record client addresses; participant privacy forbids that
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), access_log=False,
                log_level=args.log_level)
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    import httpx

    script = load_sim_script_file(args.script)
    try:
        health = httpx.get(args.target.rstrip("/") + "/healthz", timeout=10.0).json()
    except Exception:
        health = {}
    if health.get("backend_kind") == "openai_compatible" and not args.live_i_understand_costs:
        print("simulate: target runs a live backend; pass --live-i-understand-costs "
              "to load-test it anyway", file=sys.stderr)
        return 2

    report = run_simulation(script, args.target, args.concurrency)
    Path(args.out).write_text(
        json.dumps(report.to_json_dict(), ensure_ascii=False, indent=2), encoding="utf-8"
    )
    ok = sum(1 for s in report.sessions for e in s.events
             if e.kind == "message" and e.status == 200)
    failed = sum(1 for s in report.sessions for e in s.events
                 if e.kind == "message" and e.status != 200)
    print(f"simulated {len(report.sessions)} sessions: {ok} messages ok, "
          f"{failed} failed, {report.wall_time_s:.1f}s wall time")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    report = SimReport.from_json_dict(json.loads(Path(args.report).read_text(encoding="utf-8")))
    export = Path(args.export).read_bytes()
    violations = verify_report(report, export)
    if not violations:
        print("verify: OK (no violations)")
        return 0
    for violation in violations:
        print(f"verify: {violation.kind}: {violation.message}")
    return 1


def _cmd_export(args: argparse.Namespace) -> int:
    out = export_cli(args.db, args.shape, args.out)
    print(f"wrote {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "serve": _cmd_serve,
        "simulate": _cmd_simulate,
        "verify": _cmd_verify,
        "export": _cmd_export,
    }
    try:
        return handlers[args.command](args)
    except SurveyChatError as exc:
        print(f"{args.command}: {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
