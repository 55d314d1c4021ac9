"""``idfw`` command line.

``run`` starts the daemon (pipeline + HTTP API). ``state`` is a thin client
of a running daemon. ``compile``, ``check`` and ``query`` work offline on
files, and ``bench`` runs the latency benchmark in-process.

Exit codes: 0 ok, 1 runtime failure, 2 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

logger = logging.getLogger("idfw")


def _overrides(args, mapping: dict[str, str]) -> dict:
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def cmd_run(args) -> int:
    from .pipeline import Pipeline

    cfg = load_config(args.config, _overrides(args, {
        "policy": "policy",
        "replay": "replay.path",
        "syslog_bind": "syslog.bind",
        "correlation": "correlation.rules_path",
        "rule_file": "installer.rule_file",
        "api_bind": "api.bind",
        "lease": "identity.lease",
        "sweep_interval": "identity.sweep_interval",
        "batch_window": "pipeline.batch_window",
    }))
    pipeline = Pipeline.from_config(cfg).start()
    try:
        if args.no_api:
            stop = threading.Event()
            for sig in (signal.SIGINT, signal.SIGTERM):
                signal.signal(sig, lambda *_: stop.set())
            stop.wait()
        else:
            import uvicorn

            from .api import create_app

            host, port = cfg.api_bind
            uvicorn.run(create_app(pipeline), host=host, port=port, log_level="warning")
    finally:
        generation = pipeline.stop()
        print(f"final generation {generation}")
    return EXIT_OK


def _read_bindings(path: str):
    from datetime import datetime, timezone

    from .events import parse_ipv4, parse_timestamp
    from .identity import DEFAULT_LEASE, IdentityBinding, IdentitySnapshot

    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = 0
    if isinstance(data, dict):
        version = int(data.get("version", 0))
        data = data.get("bindings", [])
    now = datetime.now(timezone.utc)
    bindings = []
    for item in data:
        login = parse_timestamp(item["login_ts"]) if "login_ts" in item else now
        expiry = parse_timestamp(item["lease_expiry"]) if "lease_expiry" in item else login + DEFAULT_LEASE
        bindings.append(IdentityBinding(item["username"], parse_ipv4(item["ip"]), login, expiry))
    return IdentitySnapshot.from_bindings(bindings, version)


def cmd_compile(args) -> int:
    from .backend import write_rule_file
    from .compiler import compile_policy, emit_text
    from .policy import load_meta_policy

    policy = load_meta_policy(args.policy)
    try:
        snapshot = _read_bindings(args.bindings) if args.bindings else None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read bindings {args.bindings}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if snapshot is None:
        from .identity import IdentitySnapshot

        snapshot = IdentitySnapshot.from_bindings(())
    ruleset = compile_policy(policy, snapshot, args.block or (), generation=1)
    if args.out:
        write_rule_file(ruleset, args.out)
    else:
        sys.stdout.write(emit_text(ruleset))
    return EXIT_OK


def cmd_check(args) -> int:
    from .correlation import load_correlation_file
    from .policy import load_meta_policy, validate_against_directory

    policy = load_meta_policy(args.policy)
    print(f"{args.policy}: ok ({len(policy.rules)} rules, default {policy.default_action.value})")
    if args.correlation:
        rules = load_correlation_file(args.correlation)
        print(f"{args.correlation}: ok ({len(rules)} correlation rules)")
    if args.known_users:
        users = [u.strip() for u in Path(args.known_users).read_text(encoding="utf-8").splitlines() if u.strip()]
        for warning in validate_against_directory(policy, users):
            print(f"warning: {warning}")
    return EXIT_OK


def cmd_query(args) -> int:
    from .backend import FirewallBackend, PacketQuery, load_rule_file

    path = args.rule_file
    if path is None:
        path = load_config(args.config).rule_file
    if path is None:
        print("error: no rule file given (--rule-file or installer.rule_file)", file=sys.stderr)
        return EXIT_RUNTIME
    backend = FirewallBackend()
    backend.install(load_rule_file(path))
    d = backend.evaluate(PacketQuery(args.src, args.dst, args.proto, args.dport))
    print(json.dumps({
        "action": d.action.value,
        "matched_priority": d.matched_priority,
        "origin_rule_id": d.origin_rule_id,
        "generation": d.generation,
    }))
    return EXIT_OK


def cmd_state(args) -> int:
    import httpx

    url = args.api
    if url is None:
        host, port = load_config(args.config).api_bind
        url = f"http://{host}:{port}"
    try:
        resp = httpx.get(f"{url.rstrip('/')}/state", timeout=5.0)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        print(f"error: cannot reach daemon at {url}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(resp.json(), indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import emit_bench_csv, emit_reference_csv, run_bench_series

    cfg = load_config(args.config, _overrides(args, {
        "timeout": "bench.timeout",
        "poll": "bench.poll",
        "repeat": "bench.repeat",
        "batch_window": "pipeline.batch_window",
    }))
    cfg.validate(require_policy=False)
    counts = [int(c) for c in args.clients.split(",")]
    if any(c < 1 for c in counts):
        print("error: client counts must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    reports = run_bench_series(counts, cfg)
    print(f"{'clients':>7} {'avg_ms':>10} {'total_ms':>11} {'failed':>6}")
    for r in reports:
        print(f"{r.clients:>7} {r.avg * 1000:>10.3f} {r.total_serialized * 1000:>11.3f} {r.failed:>6}")
    if args.csv:
        emit_bench_csv(reports, args.csv)
        print(f"wrote {args.csv}")
    if args.reference:
        ref = args.reference_csv or (Path(args.csv).with_suffix(".reference.csv") if args.csv else None)
        if ref:
            emit_reference_csv(reports, ref)
            print(f"wrote {ref} (literature columns are published averages, not measurements)")
    return EXIT_RUNTIME if any(r.incomplete for r in reports) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idfw", description="Agentless identity-based firewall engine")
    parser.add_argument("--config", help="YAML config file (default: $IDFW_CONFIG)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the daemon")
    p.add_argument("--policy")
    p.add_argument("--replay", help="replay file of event-log records")
    p.add_argument("--syslog-bind", help="host:port for the UDP syslog listener")
    p.add_argument("--correlation", help="correlation rule file")
    p.add_argument("--rule-file", help="write the active ruleset here on every install")
    p.add_argument("--api-bind", help="host:port for the HTTP API")
    p.add_argument("--lease")
    p.add_argument("--sweep-interval")
    p.add_argument("--batch-window", help="experimental: coalesce events arriving within this window")
    p.add_argument("--no-api", action="store_true", help="do not start the HTTP API")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compile", help="compile a policy against a bindings file")
    p.add_argument("--policy", required=True)
    p.add_argument("--bindings", help="JSON bindings (the output of 'idfw state')")
    p.add_argument("--block", action="append", metavar="IP", help="add a block for IP (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("check", help="validate a policy document")
    p.add_argument("policy")
    p.add_argument("--correlation", help="also validate a correlation rule file")
    p.add_argument("--known-users", help="file with one directory account per line")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("query", help="evaluate a packet against a persisted rule file")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--proto", required=True, choices=["tcp", "udp"])
    p.add_argument("--dport", required=True, type=int)
    p.add_argument("--rule-file")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("state", help="dump the identity table of a running daemon")
    p.add_argument("--api", help="daemon URL (default: from api.bind)")
    p.set_defaults(func=cmd_state)

    p = sub.add_parser("bench", help="login-to-policy-active latency benchmark")
    p.add_argument("--clients", default="10,15,20,25,30", help="comma-separated client counts")
    p.add_argument("--csv", help="write results CSV here")
    p.add_argument("--reference", action="store_true", help="also write literature comparison totals")
    p.add_argument("--reference-csv")
    p.add_argument("--timeout", help="per-client timeout (default 10s)")
    p.add_argument("--poll", help="probe interval (default 1ms)")
    p.add_argument("--repeat", help="runs per client count; the median run is reported (default 3)")
    p.add_argument("--batch-window")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .policy import PolicyValidationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PolicyValidationError as exc:
        print(exc.report(), file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
