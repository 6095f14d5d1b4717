"""Command-line entry points: ``run``, ``serve`` and ``attack-suite``."""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .attacks import render_matrix, run_suite, scenario_config, scenario_sessions
from .engine import Engine, EngineFault
from .fetch import Session
from .harness import (
    ManifestInvalid,
    PortUnavailable,
    ScenarioManifest,
    ScenarioServer,
    UnknownScenario,
    load_manifest,
    scenario_fixture,
)
from .model import MalformedIri, Origin
from .policy import ConfigError, apply_overrides, preset, read_config_file
from .query import Query, QuerySyntaxError, format_bindings, parse_query

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_FAILED", "EXIT_FAULT", "EXIT_CONFIG", "EXIT_USAGE"]

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_FAULT = 2
EXIT_CONFIG = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltqp-guard", description="Link-traversal query engine with security guards.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="evaluate a query file")
    run.add_argument("query", nargs="?", help="query file; with --scenario, a file name inside the scenario")
    run.add_argument("--config", help="JSON configuration overrides")
    run.add_argument("--preset", default="permissive",
                     help="permissive, hardened, exploit:<scenario> or hardened:<scenario>")
    run.add_argument("--audit", help="write the audit report here instead of standard error")
    run.add_argument("--parallelism", type=int)
    run.add_argument("--seed-url", action="append", default=[], help="replaces the query's seeds (repeatable)")
    run.add_argument("--scenario", help="serve this scenario id or manifest during the run")
    run.add_argument("--port", type=int, default=0, help="first port for --scenario origins (0 = any)")

    serve = sub.add_parser("serve", help="serve a scenario manifest until interrupted")
    serve.add_argument("manifest", help="manifest path or built-in scenario id")
    serve.add_argument("--port", type=int, default=0)

    suite = sub.add_parser("attack-suite", help="run every scenario under exploit and hardened presets")
    suite.add_argument("--only", action="append", default=[], help="scenario id (repeatable or comma separated)")
    suite.add_argument("--audit", help="write the suite result and per-run reports as JSON")
    suite.add_argument("--parallelism", type=int)
    suite.add_argument("--quiet", action="store_true", help="omit per-scenario evidence lines")
    return parser


def _scenario(ref: str) -> ScenarioManifest:
    path = Path(ref)
    if path.suffix == ".json" or path.is_dir() or path.is_file():
        return load_manifest(path / "manifest.json" if path.is_dir() else path)
    try:
        return scenario_fixture(ref)
    except UnknownScenario:
        raise UsageError(f"unknown scenario {ref!r}") from None


def _query_text(ref: Optional[str], manifest: Optional[ScenarioManifest]) -> list[tuple[str, str]]:
    """``(id, text)`` pairs to run; a scenario without a query file runs all of its queries."""
    if ref is None:
        if manifest is None:
            raise UsageError("a query file is required without --scenario")
        return [(spec["id"], manifest.read_file(spec["file"])) for spec in manifest.queries]
    path = Path(ref)
    if not path.is_file() and manifest is not None and manifest.directory is not None:
        path = manifest.directory / ref
    try:
        return [(Path(ref).stem, path.read_text(encoding="utf-8"))]
    except OSError as exc:
        raise UsageError(f"cannot read query file {ref}: {exc.strerror}") from None


def _config(args, manifest: Optional[ScenarioManifest], server: Optional[ScenarioServer]):
    name = args.preset
    variant, _, scenario_id = name.partition(":")
    if scenario_id:
        if variant not in ("exploit", "hardened"):
            raise ConfigError(f"unknown preset {name!r}")
        if manifest is None or manifest.id.upper() != scenario_id.upper():
            raise ConfigError(f"preset {name!r} needs --scenario {scenario_id}")
        config = scenario_config(manifest, variant, server)
    else:
        config = preset(name)
        if manifest is not None:
            config = apply_overrides(config, server.expand_obj(manifest.setup))
    session_specs = []
    if args.config:
        overrides, session_specs = read_config_file(args.config)
        if server is not None:
            overrides = server.expand_obj(overrides)
            session_specs = server.expand_obj(session_specs)
        config = apply_overrides(config, overrides)
    if args.parallelism is not None:
        if args.parallelism < 1:
            raise UsageError("--parallelism must be at least 1")
        config = replace(config, parallelism=args.parallelism)
    sessions = scenario_sessions(manifest, server) if manifest is not None else []
    try:
        sessions += [Session(Origin.parse(s["origin"]), s["token"]) for s in session_specs]
    except (KeyError, TypeError, ValueError, MalformedIri) as exc:
        raise ConfigError(f"bad sessions entry: {exc}") from exc
    return config, sessions


def _with_seeds(query: Query, seeds: list[str]) -> Query:
    return replace(query, seeds=tuple(seeds)) if seeds else query


def cmd_run(args) -> int:
    manifest = _scenario(args.scenario) if args.scenario else None
    texts = _query_text(args.query, manifest)
    server = ScenarioServer(manifest, args.port) if manifest is not None else None
    try:
        expand = server.expand if server is not None else (lambda text: text)
        try:
            queries = [
                _with_seeds(parse_query(expand(text), query_id), [expand(s) for s in args.seed_url])
                for query_id, text in texts
            ]
        except QuerySyntaxError as exc:
            raise UsageError(f"query: {exc}") from None
        config, sessions = _config(args, manifest, server)
        engine = Engine(config, sessions)
        reports, code = [], EXIT_OK
        for query in queries:
            execution = engine.execute(query)
            try:
                for row in execution:
                    print(format_bindings(row.bindings), flush=True)
            except EngineFault as fault:
                print(f"ltqp-guard: strict mode fault: {fault}", file=sys.stderr)
                code = EXIT_FAULT
            reports.append(execution.report.to_dict())
            if code:
                break
    finally:
        if server is not None:
            server.stop()
    _write_audit(args.audit, reports[0] if len(reports) == 1 else {"reports": reports})
    return code


def _write_audit(path: Optional[str], payload) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text, file=sys.stderr)


def cmd_serve(args) -> int:
    manifest = _scenario(args.manifest)
    server = ScenarioServer(manifest, args.port)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    for index, (name, base) in enumerate(server.base_urls.items()):
        print(f"{base}/\t{name}" if index else f"{base}/\t{name}\t(base)", flush=True)
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_attack_suite(args) -> int:
    only = [part.strip() for item in args.only for part in item.split(",") if part.strip()]
    try:
        result = run_suite(only or None, args.parallelism)
    except UnknownScenario as exc:
        raise UsageError(f"unknown scenario {exc.args[0]!r}") from None
    print(render_matrix(result, verbose=not args.quiet or not result.passed))
    if args.audit:
        payload = result.to_dict()
        payload["reports"] = {
            scenario_id: {ctx.variant: [e.report.to_dict() for e in ctx.executions] for ctx in pair}
            for scenario_id, pair in result.contexts.items()
        }
        _write_audit(args.audit, payload)
    return EXIT_OK if result.passed else EXIT_FAILED


_COMMANDS = {"run": cmd_run, "serve": cmd_serve, "attack-suite": cmd_attack_suite}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ltqp-guard: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManifestInvalid as exc:
        print(f"ltqp-guard: invalid manifest: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"ltqp-guard: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PortUnavailable as exc:
        print(f"ltqp-guard: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
