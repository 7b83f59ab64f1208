"""Command line entry point: ``ephemera run|verify|routes|inspect|serve|client``.

Exit codes: 0 success, 1 a fraud verdict, 2 a scenario, input or action error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .catalog import default_registry
from .errors import EphemeraError, MalformedLog, ScenarioError
from .router import RouterPolicy, decision_table, format_decision_table

EXIT_OK = 0
EXIT_FRAUD = 1
EXIT_ERROR = 2


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load(name: str):
    from .sim.scenario import load_scenario

    return load_scenario(name)


def cmd_run(args) -> int:
    from .sim.dump import write_state_dump
    from .sim.metrics import report
    from .sim.runner import ScenarioRun

    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        _err(f"{args.scenario}: {exc}")
        return EXIT_ERROR
    run = ScenarioRun(scenario, args.seed)
    try:
        metrics = run.run()
    except ScenarioError as exc:
        _err(f"{args.scenario}: {exc}")
        return EXIT_ERROR
    text = report(metrics, args.format)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        text = metrics.to_text()
    sys.stdout.write(text)
    if args.archive:
        run.cluster.archive.write(args.archive)
    if args.dump:
        write_state_dump(run.cluster, args.dump)
    if metrics.fraud:
        return EXIT_FRAUD
    return EXIT_ERROR if metrics.errors else EXIT_OK


def cmd_verify(args) -> int:
    from .verification import archive_and_replay

    try:
        results = archive_and_replay(args.archive, default_registry())
    except (MalformedLog, OSError) as exc:
        _err(f"{args.archive}: {exc}")
        return EXIT_ERROR
    status = EXIT_OK
    for er_id, res in results.items():
        fraud = res.first_fraud
        if fraud is None:
            print(f"{er_id}: {len(res.verdicts)} commits verified")
            continue
        m = fraud.mismatch
        addr = m.address.hex() if m.address is not None else "-"
        print(f"{er_id}: commit {fraud.commit_id} FRAUD ({m.reason}) first mismatching address {addr}")
        status = EXIT_FRAUD
    if not results:
        print("archive holds no sessions")
    return status


def cmd_routes(args) -> int:
    if args.table:
        policy = args.policy
        if policy is None and args.scenario:
            policy = _load(args.scenario).policy
        for line in format_decision_table(decision_table(RouterPolicy(policy or "force-settle"))):
            print(line)
        return EXIT_OK
    if not args.scenario:
        _err("routes needs a scenario unless --table is given")
        return EXIT_ERROR
    from .sim.runner import ScenarioRun

    try:
        run = ScenarioRun(_load(args.scenario), args.seed)
        metrics = run.run()
    except ScenarioError as exc:
        _err(f"{args.scenario}: {exc}")
        return EXIT_ERROR
    for line in run.cluster.router.trace_lines():
        print(line)
    return EXIT_ERROR if metrics.errors else EXIT_OK


def cmd_inspect(args) -> int:
    from .ecs.schema import parse_schemas
    from .sim.dump import describe_dump, load_state_dump

    try:
        doc = load_state_dump(args.dump)
        extra = parse_schemas(open(args.schemas).read()) if args.schemas else []
    except (EphemeraError, OSError) as exc:
        _err(str(exc))
        return EXIT_ERROR
    for line in describe_dump(doc, extra):
        print(line)
    return EXIT_OK


def _scenario_cluster(name: Optional[str]):
    from .cluster import Cluster

    if not name:
        return Cluster()
    from .sim.runner import ScenarioRun

    run = ScenarioRun(_load(name))
    run.setup()
    for spec in run.scenario.rollups:
        run._launch(spec)
    return run.cluster


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    try:
        cluster = _scenario_cluster(args.scenario)
    except EphemeraError as exc:
        _err(str(exc))
        return EXIT_ERROR
    uvicorn.run(create_app(cluster), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_client(args) -> int:
    import httpx

    url = args.url.rstrip("/")
    op = args.op
    try:
        if op == "status":
            r = httpx.get(f"{url}/status")
        elif op == "trace":
            r = httpx.get(f"{url}/trace")
        elif op == "account":
            r = httpx.get(f"{url}/accounts/{args.values[0]}")
        elif op == "read":
            r = httpx.post(f"{url}/rpc/read", json={"accounts": args.values})
        elif op == "send":
            r = httpx.post(f"{url}/rpc/send", json={"tx": args.values[0]})
        elif op == "blockhash":
            r = httpx.post(f"{url}/rpc/blockhash", json={"target": args.values[0] if args.values else "base"})
        elif op == "advance":
            r = httpx.post(f"{url}/sim/advance", json={"ms": int(args.values[0])})
        elif op == "subscribe":
            r = httpx.post(f"{url}/rpc/subscribe", json={"accounts": args.values or None})
        elif op == "poll":
            r = httpx.get(f"{url}/rpc/subscriptions/{args.values[0]}")
        else:  # argparse restricts choices
            raise AssertionError(op)
    except httpx.HTTPError as exc:
        _err(f"{url}: {exc}")
        return EXIT_ERROR
    except (IndexError, ValueError):
        _err(f"{op}: missing or invalid argument")
        return EXIT_ERROR
    print(json.dumps(r.json(), indent=2, sort_keys=True))
    return EXIT_OK if r.is_success else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ephemera", description="Simulated base chain with ephemeral rollups.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and report metrics")
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", help="write the report here")
    r.add_argument("--format", choices=("text", "jsonl"), default="text")
    r.add_argument("--archive", help="write the rollup log archive here")
    r.add_argument("--dump", help="write the final base-layer state here")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="replay a log archive and check every commit")
    v.add_argument("archive")
    v.set_defaults(func=cmd_verify)

    rt = sub.add_parser("routes", help="print routing decisions")
    rt.add_argument("scenario", nargs="?")
    rt.add_argument("--seed", type=int, default=None)
    rt.add_argument("--table", action="store_true", help="enumerate the full decision table instead")
    rt.add_argument("--policy", choices=("force-settle", "reject"))
    rt.set_defaults(func=cmd_routes)

    i = sub.add_parser("inspect", help="describe a state dump")
    i.add_argument("dump")
    i.add_argument("--schemas", help="extra schema definition file")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("serve", help="serve a cluster over HTTP")
    s.add_argument("--scenario", help="pre-load this scenario's setup and rollups")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("client", help="talk to a running server")
    c.add_argument("--url", default="http://127.0.0.1:8000")
    c.add_argument("op", choices=("status", "trace", "account", "read", "send", "blockhash", "advance", "subscribe", "poll"))
    c.add_argument("values", nargs="*")
    c.set_defaults(func=cmd_client)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
