"""Runs every scenario twice, exploit preset then hardened preset, and judges the evidence.

Each scenario has one evidence predicate that is true when the attack
worked. A matrix row passes when the predicate holds for the exploit run
and fails for the hardened run.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional
from urllib.parse import unquote_plus

import psutil

from .engine import Engine, EngineFault
from .fetch import Session
from .harness import SCENARIO_IDS, Delay, ScenarioManifest, ScenarioServer, scenario_fixture
from .model import Origin, Vulnerability
from .policy import EngineConfig, merge_overrides, apply_overrides, preset
from .query import parse_query
from .report import ExploitMarker

__all__ = [
    "Evidence",
    "RunContext",
    "MatrixRow",
    "SuiteResult",
    "EVIDENCE",
    "MEMORY_BOUND_BYTES",
    "scenario_config",
    "scenario_sessions",
    "run_scenario",
    "run_suite",
    "render_matrix",
]

MEMORY_BOUND_BYTES = 64 * 1024 * 1024
DEFAULT_QUAD_CAP = EngineConfig().parse_limits.max_quads_per_document


@dataclass
class Evidence:
    holds: bool
    text: str


@dataclass
class RunContext:
    manifest: ScenarioManifest
    variant: str
    config: EngineConfig
    base_urls: dict
    executions: list = field(default_factory=list)
    fault: Optional[EngineFault] = None
    log: list = field(default_factory=list)
    endpoint_log: list = field(default_factory=list)
    state: dict = field(default_factory=dict)
    rss_growth: int = 0
    seconds: float = 0.0

    def requests(self, origin: str, path: Optional[str] = None, prefix: Optional[str] = None) -> list[dict]:
        out = []
        for entry in self.log:
            if entry["origin"] != origin:
                continue
            bare = entry["path"].split("?", 1)[0]
            if path is not None and bare != path:
                continue
            if prefix is not None and not bare.startswith(prefix):
                continue
            out.append(entry)
        return out

    def origin_name(self, url: str) -> Optional[str]:
        for name, base in self.base_urls.items():
            if url == base or url.startswith(base + "/"):
                return name
        return None

    def rows(self, index: int = -1) -> list:
        return self.executions[index].rows if self.executions else []

    def names(self, variable: str, index: int = -1) -> set[str]:
        return {row.bindings[variable].lexical for row in self.rows(index) if variable in row.bindings}

    def records(self, origin: str, path: str) -> list:
        url = self.base_urls[origin] + path
        return [
            d for execution in self.executions for d in execution.report.documents_fetched
            if d.url == url or d.request_url == url
        ]


def scenario_config(manifest: ScenarioManifest, variant: str, server: Optional[ScenarioServer] = None) -> EngineConfig:
    """``exploit`` = hardened + setup + exploit overrides; ``hardened`` = hardened + setup + hardened overrides."""
    if variant not in ("exploit", "hardened"):
        raise ValueError(f"unknown variant {variant!r}")
    overrides = merge_overrides(manifest.setup, manifest.exploit if variant == "exploit" else manifest.hardened)
    if server is not None:
        overrides = server.expand_obj(overrides)
    return apply_overrides(preset("hardened"), overrides)


def scenario_sessions(manifest: ScenarioManifest, server: ScenarioServer) -> list[Session]:
    return [Session(Origin.parse(server.base_urls[s["origin"]]), s["token"]) for s in manifest.sessions]


class _RssSampler:
    """Coarse peak-RSS tracker running on a background thread."""

    def __init__(self, interval: float = 0.02):
        self._process = psutil.Process()
        self._interval = interval
        self._stop = threading.Event()
        self.start_rss = self._process.memory_info().rss
        self.peak = self.start_rss
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self._process.memory_info().rss)
            self._stop.wait(self._interval)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self._process.memory_info().rss)

    @property
    def growth(self) -> int:
        return self.peak - self.start_rss


def run_scenario(
    manifest: ScenarioManifest,
    variant: str,
    parallelism: Optional[int] = None,
    config: Optional[EngineConfig] = None,
    keep_admitted: bool = False,
) -> RunContext:
    """Serve the scenario, run its queries in order on one engine and collect the logs."""
    with ScenarioServer(manifest) as server:
        if config is None:
            config = scenario_config(manifest, variant, server)
        if parallelism is not None and manifest.id != "S10":
            config = replace(config, parallelism=parallelism)
        ctx = RunContext(manifest, variant, config, dict(server.base_urls))
        engine = Engine(config, scenario_sessions(manifest, server))
        started = time.monotonic()
        with _RssSampler() as sampler:
            for spec in manifest.queries:
                query = parse_query(server.expand(manifest.read_file(spec["file"])), spec["id"])
                execution = engine.execute(query, keep_admitted=keep_admitted)
                ctx.executions.append(execution)
                try:
                    execution.run()
                except EngineFault as fault:
                    ctx.fault = fault
                    break
        ctx.seconds = time.monotonic() - started
        ctx.rss_growth = sampler.growth
        ctx.log = server.log()
        ctx.endpoint_log = server.endpoint_log()
        ctx.state = server.state()
    return ctx


# -- evidence predicates -------------------------------------------------------


def _s1(ctx: RunContext) -> Evidence:
    names = ctx.names("n")
    return Evidence("Dave" in names, f"names={sorted(names)}")


PLANTED_PHONE = "+1-555-0142"


def _s2(ctx: RunContext) -> Evidence:
    seen = [e for e in ctx.endpoint_log if PLANTED_PHONE in e["bindings"] or PLANTED_PHONE in unquote_plus(e["raw"])]
    blocked = sum(len(x.report.events_of(Vulnerability.LEAKAGE)) for x in ctx.executions)
    return Evidence(
        bool(seen),
        f"endpoint requests={len(ctx.endpoint_log)}, carrying phone={len(seen)}, leakage events={blocked}",
    )


def _s3(ctx: RunContext) -> Evidence:
    flag = ctx.state.get("aliceStore")
    hits = ctx.requests("alice", "/sparql")
    statuses = [e["status"] for e in hits]
    return Evidence(flag == "mutated", f"aliceStore={flag}, endpoint responses={statuses}")


def _s4(ctx: RunContext) -> Evidence:
    tainted = [
        row for row in ctx.rows()
        if any(ctx.origin_name(src) == "hacker" for src in row.provenance)
    ]
    names = ctx.names("name")
    return Evidence(bool(tainted), f"names={sorted(names)}, rows using hacker data={len(tainted)}")


def _s5(ctx: RunContext) -> Evidence:
    records = ctx.records("carol", "/widget.html")
    consumed = sum(r.bytes for r in records)
    ignored = sum(len(x.report.events_of(Vulnerability.CODE_EXECUTION)) for x in ctx.executions)
    return Evidence(consumed > 0, f"script document bytes given to the parser={consumed}, ignored-content events={ignored}")


def _s6(ctx: RunContext) -> Evidence:
    numbers = len(ctx.requests("carol", prefix="/numbers/"))
    loop = len(ctx.requests("carol", "/loop"))
    # the per-query cache hides repeated cycle visits from the server, so count dereferences
    cycle = max(len(ctx.records("carol", "/app/a.ttl")), len(ctx.records("carol", "/app/b.ttl")))
    trapped = numbers > 101 or loop > 22 or cycle > 1
    return Evidence(
        trapped, f"chain pages fetched={numbers}, redirect requests={loop}, most dereferences of a cycle page={cycle}"
    )


def _s7(ctx: RunContext) -> Evidence:
    stream = sum(r.quads for r in ctx.records("carol", "/stream.ttl"))
    big = sum(r.quads for r in ctx.records("carol", "/big-iri.ttl"))
    hogging = sum(len(x.report.events_of(Vulnerability.SYSTEM_HOGGING)) for x in ctx.executions)
    mib = ctx.rss_growth / (1024 * 1024)
    hogged = stream > DEFAULT_QUAD_CAP or big > 0 or ctx.rss_growth >= MEMORY_BOUND_BYTES
    return Evidence(
        hogged,
        f"stream quads={stream} (cap {DEFAULT_QUAD_CAP}), oversized-IRI quads={big}, "
        f"hogging events={hogging}, rss growth={mib:.1f} MiB",
    )


def _s8(ctx: RunContext) -> Evidence:
    corruption = sum(len(x.report.events_of(Vulnerability.DOCUMENT_CORRUPTION)) for x in ctx.executions)
    names = ctx.names("name")
    crashed = ctx.fault is not None
    return Evidence(crashed, f"query aborted={crashed}, names={sorted(names)}, corruption events={corruption}")


def bob_profile_delay(manifest: ScenarioManifest) -> int:
    behavior = manifest.origins["bob"].resources["/profile.ttl"]
    return behavior.millis if isinstance(behavior, Delay) else 0


def carol_gap_millis(ctx: RunContext) -> Optional[float]:
    """Time between Carol's pictures request and her profile request, as Carol sees it."""
    pictures = ctx.requests("carol", "/pictures.ttl")
    profile = ctx.requests("carol", "/profile.ttl")
    if not pictures or not profile:
        return None
    return (profile[-1]["timestamp"] - pictures[-1]["timestamp"]) * 1000.0


def _s9(ctx: RunContext) -> Evidence:
    gets = len(ctx.requests("bob", "/profile.ttl"))
    gap = carol_gap_millis(ctx)
    delay = bob_profile_delay(ctx.manifest)
    gap_text = "n/a" if gap is None else f"{gap:.0f} ms"
    return Evidence(gets == 1, f"Bob profile GETs={gets}, Carol-side gap={gap_text} (delay {delay} ms)")


def dereference_index(ctx: RunContext, origin: str, path: str) -> Optional[int]:
    url = ctx.base_urls[origin] + path
    order = ctx.executions[-1].dereference_order if ctx.executions else []
    return order.index(url) if url in order else None


def _s10(ctx: RunContext) -> Evidence:
    carol = dereference_index(ctx, "carol", "/store.ttl")
    dan = dereference_index(ctx, "dan", "/store.ttl")
    ahead = carol is not None and dan is not None and carol < dan
    return Evidence(ahead, f"dereference index Carol={carol}, Dan={dan}")


EVIDENCE: dict[str, Callable[[RunContext], Evidence]] = {
    "S1": _s1,
    "S2": _s2,
    "S3": _s3,
    "S4": _s4,
    "S5": _s5,
    "S6": _s6,
    "S7": _s7,
    "S8": _s8,
    "S9": _s9,
    "S10": _s10,
}


# -- suite -------------------------------------------------------------------


@dataclass
class MatrixRow:
    id: str
    vulnerability: Vulnerability
    exploit_demonstrated: bool
    mitigation_effective: bool
    exploit_evidence: str
    hardened_evidence: str
    requires_policy: bool = False
    seconds: float = 0.0

    @property
    def axes(self) -> tuple[str, ...]:
        return self.vulnerability.axes

    @property
    def passed(self) -> bool:
        return self.exploit_demonstrated and self.mitigation_effective

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "vulnerability": self.vulnerability.value,
            "axes": list(self.axes),
            "exploitDemonstrated": self.exploit_demonstrated,
            "mitigationEffective": self.mitigation_effective,
            "passed": self.passed,
            "exploitEvidence": self.exploit_evidence,
            "hardenedEvidence": self.hardened_evidence,
            "needsContentPolicy": self.requires_policy,
            "seconds": round(self.seconds, 2),
        }


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)
    contexts: dict = field(default_factory=dict)
    non_get_requests: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows) and self.non_get_requests == 0

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "nonGetRequests": self.non_get_requests,
            "passed": self.passed,
        }


def _mark(ctx: RunContext, evidence: Evidence) -> None:
    for execution in ctx.executions:
        execution.report.exploit_markers.append(ExploitMarker(ctx.manifest.id, evidence.holds, evidence.text))


def run_suite(only: Optional[Iterable[str]] = None, parallelism: Optional[int] = None) -> SuiteResult:
    wanted = [s.upper() for s in only] if only else list(SCENARIO_IDS)
    result = SuiteResult()
    for scenario_id in wanted:
        manifest = scenario_fixture(scenario_id)
        judge = EVIDENCE[manifest.id]
        started = time.monotonic()
        exploit = run_scenario(manifest, "exploit", parallelism)
        hardened = run_scenario(manifest, "hardened", parallelism)
        shown, kept = judge(exploit), judge(hardened)
        _mark(exploit, shown)
        _mark(hardened, kept)
        for ctx in (exploit, hardened):
            result.non_get_requests += sum(1 for e in ctx.log if e["method"] != "GET")
        result.contexts[manifest.id] = (exploit, hardened)
        result.rows.append(
            MatrixRow(
                manifest.id,
                manifest.vulnerability,
                shown.holds,
                not kept.holds,
                shown.text,
                kept.text,
                manifest.requires_policy,
                time.monotonic() - started,
            )
        )
    return result


_AXES = ("Query Results", "Data Integrity", "Query Process")


def render_matrix(result: SuiteResult, verbose: bool = True) -> str:
    header = ["id", "vulnerability", *_AXES, "exploit", "mitigated", "result"]
    table = [header]
    for row in result.rows:
        table.append(
            [
                row.id,
                row.vulnerability.value + (" *" if row.requires_policy else ""),
                *("x" if axis in row.axes else "" for axis in _AXES),
                "yes" if row.exploit_demonstrated else "NO",
                "yes" if row.mitigation_effective else "NO",
                "pass" if row.passed else "FAIL",
            ]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    passed = sum(r.passed for r in result.rows)
    lines.append(f"{passed}/{len(result.rows)} scenarios pass; non-GET requests: {result.non_get_requests}")
    if any(r.requires_policy for r in result.rows):
        lines.append("* blocked by the hardened content policy; the empty default policy admits these statements")
    if verbose:
        for row in result.rows:
            lines.append(f"{row.id} exploit:  {row.exploit_evidence}")
            lines.append(f"{row.id} hardened: {row.hardened_evidence}")
    return "\n".join(lines)
