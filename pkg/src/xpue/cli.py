"""Command line: ``xpue replay|serve|sim|check``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path

from . import service
from .ingestion import BindFailure
from .scopes import errors_only
from .simulator import ScenarioError, generate, load_scenario

logger = logging.getLogger("xpue")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xpue", description="xPUE metrics from power-measurement streams.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help=f"engine config (TOML/JSON); defaults to ${service.CONFIG_ENV}, "
                                         "then the shipped default")

    rp = sub.add_parser("replay", help="run the pipeline over trace files and write a JSON report")
    common(rp)
    rp.add_argument("--trace", action="append", default=[], help="JSONL or CSV trace; repeatable")
    rp.add_argument("--out", help="report path (default: stdout)")
    rp.add_argument("--strict", action="store_true", help="exit 2 when any compound metric is undefined")
    rp.add_argument("--lateness-ms", type=int)

    sv = sub.add_parser("serve", help="run the live pipeline behind the ingest endpoint")
    common(sv)
    sv.add_argument("--listen", help="ingest address host:port")
    sv.add_argument("--exposition", help="exposition address host:port")
    sv.add_argument("--lateness-ms", type=int)
    sv.add_argument("--queue-bound", type=int)
    sv.add_argument("--sink", help="line-protocol output file")
    sv.add_argument("--out", help="write the session report here on shutdown")
    sv.add_argument("--strict", action="store_true")

    sm = sub.add_parser("sim", help="generate a synthetic trace")
    common(sm)
    sm.add_argument("--scenario", required=True, help="scenario file or built-in name")
    sm.add_argument("--out", required=True)
    sm.add_argument("--seed", type=int)

    ck = sub.add_parser("check", help="validate a config, its registry and stacks")
    common(ck)
    return p


def _override_ingest(config: service.EngineConfig, args: argparse.Namespace) -> service.EngineConfig:
    ingest = config.ingest
    if getattr(args, "lateness_ms", None) is not None:
        if args.lateness_ms < 0:
            raise service.ConfigError("--lateness-ms must be >= 0")
        ingest = replace(ingest, lateness_ms=args.lateness_ms)
    if getattr(args, "queue_bound", None) is not None:
        if args.queue_bound <= 0:
            raise service.ConfigError("--queue-bound must be positive")
        ingest = replace(ingest, queue_bound=args.queue_bound)
    return replace(config, ingest=ingest)


def cmd_check(args: argparse.Namespace) -> int:
    diags = service.check_config(args.config)
    for d in diags:
        print(d)
    if errors_only(diags):
        return service.EXIT_CONFIG
    print("ok")
    return service.EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    config = _override_ingest(service.load_config(args.config), args)
    code, report = service.replay(config, args.trace, args.out, strict=args.strict)
    if report is not None and args.out is None:
        sys.stdout.write(service.dump_report(report))
    return code


def cmd_serve(args: argparse.Namespace) -> int:
    config = _override_ingest(service.load_config(args.config), args)
    session = service.ServeSession(config, listen=args.listen, exposition_listen=args.exposition,
                                   sink_path=args.sink)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    session.start()
    ih, ip = session.ingest.address
    eh, ep = session.exposition.address
    print(json.dumps({"ingest": f"{ih}:{ip}", "exposition": f"{eh}:{ep}"}), flush=True)
    while not done.wait(0.2):
        pass
    report = session.stop()
    if args.out:
        try:
            Path(args.out).write_text(service.dump_report(report), encoding="utf-8")
        except OSError as exc:
            logger.error("cannot write report: %s", exc)
            return service.EXIT_IO
    if args.strict and service.undefined_compounds(report):
        return service.EXIT_UNDEFINED
    return service.EXIT_OK


def cmd_sim(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    generate(scenario, args.out)
    return service.EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        logging.getLogger("xpue.metrics").setLevel(logging.ERROR)
    handler = {"check": cmd_check, "replay": cmd_replay, "serve": cmd_serve, "sim": cmd_sim}[args.command]
    try:
        return handler(args)
    except (service.ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return service.EXIT_CONFIG
    except BindFailure as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return service.EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return service.EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
