"""Acceptance criteria, one test each.

Every test prints a single ``[AC n] PASS|FAIL  title: detail`` line before
asserting, so the verdicts show up in plain ``pytest -v`` output as well as
in ``python tests/test_acceptance.py``.
"""

import random
import sys
from pathlib import Path
from urllib.parse import unquote_plus

import pytest

from ltqp_guard.attacks import PLANTED_PHONE, run_scenario, run_suite
from ltqp_guard.cli import EXIT_FAULT, EXIT_OK, main
from ltqp_guard.engine import Engine
from ltqp_guard.fetch import Dereferencer, Session, SessionStore
from ltqp_guard.harness import SCENARIO_IDS, scenario_fixture
from ltqp_guard.model import Origin, Vulnerability
from ltqp_guard.parser import as_stream, parse_document_stream
from ltqp_guard.policy import EngineConfig, audit_defaults
from ltqp_guard.query import parse_query

sys.path.insert(0, str(Path(__file__).parent))

from conftest import turtle  # noqa: E402
from oracle import brute_force, pattern_tuple, quad_tuple  # noqa: E402
from test_engine import _as_terms, _manifest, _reachable_triples, random_graph, random_patterns  # noqa: E402


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[AC {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def suite():
    return run_suite()


def test_ac01_attack_matrix(capsys, suite):
    passed = [r.id for r in suite.rows if r.passed]
    failed = [r.id for r in suite.rows if not r.passed]
    ok = [r.id for r in suite.rows] == list(SCENARIO_IDS) and not failed
    verdict(capsys, 1, "attack suite coverage", ok, f"{len(passed)}/10 scenarios pass, failing={failed}")


def test_ac02_names_result_sets(capsys, suite):
    exploit, hardened = suite.contexts["S1"]
    permissive = run_scenario(scenario_fixture("S1"), "exploit", config=EngineConfig())
    got = (permissive.names("n"), exploit.names("n"), hardened.names("n"))
    ok = got == ({"Bob", "Dave", "Carol"}, {"Bob", "Dave", "Carol"}, {"Bob", "Carol"})
    verdict(capsys, 2, "names query result sets", ok,
            f"default={sorted(got[0])}, exploit={sorted(got[1])}, self-origin policy={sorted(got[2])}")


def test_ac03_traversal_budgets(capsys, suite):
    _, ctx = suite.contexts["S6"]
    pages = sorted(int(e["path"].rsplit("/", 1)[1]) for e in ctx.requests("carol", prefix="/numbers/"))
    loop = len(ctx.requests("carol", "/loop"))
    cycle = [len(ctx.requests("carol", p)) for p in ("/app/a.ttl", "/app/b.ttl")]
    ok = pages == list(range(101)) and loop == 22 and cycle == [1, 1]
    verdict(capsys, 3, "traversal budgets", ok,
            f"chain pages {pages[0] if pages else None}..{pages[-1] if pages else None} ({len(pages)} requests), "
            f"redirect requests={loop} ({loop - 1} hops), cycle page requests={cycle}")


def test_ac04_bounded_parsing(capsys, suite):
    _, ctx = suite.contexts["S7"]
    cap = ctx.config.parse_limits.max_quads_per_document
    stream = sum(r.quads for r in ctx.records("carol", "/stream.ttl"))
    big_url = ctx.base_urls["carol"] + "/big-iri.ttl"
    big = sum(r.quads for r in ctx.records("carol", "/big-iri.ttl"))
    big_events = [
        e for x in ctx.executions for e in x.report.events_of(Vulnerability.SYSTEM_HOGGING) if e.subject_url == big_url
    ]
    mib = ctx.rss_growth / (1024 * 1024)
    ok = stream == cap and mib < 64 and big == 0 and len(big_events) == 1
    verdict(capsys, 4, "bounded parsing", ok,
            f"stream quads={stream} (cap {cap}), rss growth={mib:.1f} MiB, "
            f"oversized-IRI quads={big}, its hogging events={len(big_events)}")


def test_ac05_no_leak_to_endpoint(capsys, suite):
    exploit, hardened = suite.contexts["S2"]

    def leaked(ctx):
        # endpoint requests are url-encoded, so search the decoded form too
        stub = sum(1 for e in ctx.endpoint_log if PLANTED_PHONE in e["bindings"] or PLANTED_PHONE in unquote_plus(e["raw"]))
        return stub + sum(1 for e in ctx.log if PLANTED_PHONE in unquote_plus(e["path"]))

    on, off = leaked(hardened), leaked(exploit)
    ok = hardened.config.same_origin_intermediate and not exploit.config.same_origin_intermediate and on == 0 and off > 0
    verdict(capsys, 5, "intermediate results stay home", ok,
            f"log entries carrying the phone: mitigation on={on}, off={off}")


def test_ac06_integrity(capsys, suite):
    exploit, hardened = suite.contexts["S3"]
    flags = (hardened.state.get("aliceStore"), exploit.state.get("aliceStore"))
    ok = flags == ("intact", "mutated") and suite.non_get_requests == 0
    verdict(capsys, 6, "stored data integrity", ok,
            f"hardened flag={flags[0]}, exploit flag={flags[1]}, non-GET requests in suite={suite.non_get_requests}")


def test_ac07_join_equivalence(capsys, serve):
    mismatches = []
    for scenario_id in SCENARIO_IDS:
        for variant in ("exploit", "hardened"):
            ctx = run_scenario(scenario_fixture(scenario_id), variant, keep_admitted=True)
            for execution in ctx.executions:
                endpoint_urls = {e.endpoint_url for e in execution.report.endpoints}
                emitted = {
                    frozenset(r.bindings.items()) for r in execution.rows
                    if not endpoint_urls & set(r.provenance)
                }
                expected = brute_force([pattern_tuple(p) for p in execution.query.patterns],
                                       [quad_tuple(q) for q in execution.admitted])
                if emitted != expected:
                    mismatches.append(f"{scenario_id}/{variant}/{execution.query.id}")
    for seed in range(100):
        rng = random.Random(seed)
        docs, nodes = random_graph(rng)
        server = serve(_manifest(docs))
        lines = random_patterns(rng, nodes)
        query = parse_query(f"SEED <{server.url('main', '/d0')}>\n" + "\n".join(server.expand(p) for p in lines))
        rows = Engine(EngineConfig(parallelism=1 + seed % 3)).execute(query).run()
        emitted = [frozenset(r.bindings.items()) for r in rows]
        triples = [_as_terms(t) for t in _reachable_triples(server, docs)]
        expected = brute_force([pattern_tuple(p) for p in query.patterns], triples)
        if len(emitted) != len(set(emitted)) or set(emitted) != expected:
            mismatches.append(f"random seed {seed}")
        server.stop()
    verdict(capsys, 7, "incremental join equals brute force", not mismatches,
            f"20 fixture runs + 100 random graphs, mismatches={mismatches or 'none'}")


def test_ac08_resilience(capsys, tmp_path):
    lenient_audit, strict_audit = tmp_path / "lenient.json", tmp_path / "strict.json"
    lenient = main(["run", "--scenario", "S8", "--preset", "hardened:S8", "--audit", str(lenient_audit)])
    strict = main(["run", "--scenario", "S8", "--preset", "exploit:S8", "--audit", str(strict_audit)])
    capsys.readouterr()

    ctx = run_scenario(scenario_fixture("S8"), "hardened")
    directory = scenario_fixture("S8").directory
    intact = []
    for name in ("profile.ttl", "friends.ttl"):
        source = "carol.ttl" if name == "profile.ttl" else name
        outcome = parse_document_stream(as_stream((directory / source).read_bytes()), ctx.base_urls["carol"] + "/" + name)
        intact.extend(quad_tuple(q) for q in outcome.quads)
    pattern = ctx.executions[0].query.patterns
    derivable = brute_force([pattern_tuple(p) for p in pattern], intact)
    emitted = {frozenset(r.bindings.items()) for r in ctx.rows()}

    broken = {ctx.base_urls["carol"] + p for p in ("/broken.ttl", "/gone.ttl")}
    events = [e.subject_url for e in ctx.executions[0].report.events_of(Vulnerability.DOCUMENT_CORRUPTION)]
    ok = (
        lenient == EXIT_OK and strict == EXIT_FAULT and ctx.fault is None
        and derivable <= emitted and sorted(events) == sorted(broken)
    )
    verdict(capsys, 8, "resilience to broken documents", ok,
            f"lenient exit={lenient}, strict exit={strict}, intact-derivable rows present="
            f"{len(derivable & emitted)}/{len(derivable)}, corruption events per bad document="
            f"{[events.count(u) for u in sorted(broken)]}")


def test_ac09_cache_semantics(capsys, serve):
    manifest = scenario_fixture("S9")
    shared = run_scenario(manifest, "exploit")
    per_query = run_scenario(manifest, "hardened")
    counts = (len(shared.requests("bob", "/profile.ttl")), len(per_query.requests("bob", "/profile.ttl")))
    modes = (shared.config.cache_mode, per_query.config.cache_mode)

    server = serve({"resources": {"/doc.ttl": turtle('<#me> <http://xmlns.com/foaf/0.1/name> "Bob" .\n')}})
    origin = Origin.parse(server.base_urls["main"])
    deref = Dereferencer(sessions=SessionStore([Session(origin, "tok")]))
    url = server.url("main", "/doc.ttl")
    first = deref.dereference(url, cache_mode="shared", allow_session=lambda t, r, s: True)
    first.read_all()
    first.close()
    second = deref.dereference(url, cache_mode="shared", referrer_origin=Origin("http", "elsewhere.example", 80),
                               allow_session=lambda t, r, s: False)
    second.read_all()
    second.close()
    auth = [e["authorization"] for e in server.log()]

    ok = modes == ("shared", "perQuery") and counts == (1, 2) and not second.from_cache and auth == [True, False]
    verdict(capsys, 9, "cache semantics", ok,
            f"Bob profile GETs shared={counts[0]}, perQuery={counts[1]}; anonymous re-request "
            f"{'hit' if second.from_cache else 'missed'} the authenticated entry, server saw auth={auth}")


RECOMMENDATIONS = {
    "same-origin policy for authentication sessions": {"sessionScoping"},
    "only traverse using HTTP GET": {"fetchPolicy.getOnly"},
    "restrict link path lengths": {"budgets.maxDepth", "budgets.historyEnabled", "fetchPolicy.maxRedirects"},
    "sandbox parsing of untrusted data": {
        "parseLimits.maxIriBytes", "parseLimits.maxLiteralBytes", "parseLimits.maxDocumentBytes",
        "parseLimits.parseBudgetMillis", "mediaTypeGuard", "fetchPolicy.allowFileScheme",
    },
    "errors do not crash the query process": {"mode"},
}


def test_ac10_defaults_audit(capsys):
    lines = audit_defaults(EngineConfig())
    covered = {}
    for line in lines:
        covered.setdefault(line.recommendation, set()).add(line.field)
    bad = [f"{line.field} ({line.detail})" for line in lines if not line.ok]
    ok = covered == RECOMMENDATIONS and not bad
    verdict(capsys, 10, "default configuration audit", ok,
            f"{len(covered)} recommendations, {len(lines)} fields checked, failing={bad or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
