import random

import pytest

from ltqp_guard.attacks import run_scenario
from ltqp_guard.engine import (
    Delegation,
    EndpointDescriptor,
    Engine,
    EngineFault,
    delegate_pattern,
    discover_endpoint,
)
from ltqp_guard.fetch import Dereferencer
from ltqp_guard.harness import SCENARIO_IDS, scenario_fixture
from ltqp_guard.model import IRI, Literal, Origin, SourcedQuad, Triple, Vulnerability, serialize_term
from ltqp_guard.policy import ENDPOINT_PREDICATE, EngineConfig, preset
from ltqp_guard.query import Variable, parse_pattern, parse_query

from conftest import turtle
from oracle import brute_force, pattern_tuple, quad_tuple

# -- randomized graphs ---------------------------------------------------------

PREDICATES = ["http://ex.org/p0", "http://ex.org/p1"]
LITERALS = ['"v0"', '"v1"']


def random_graph(rng):
    """Up to 6 documents and 40 statements on one origin, as N-Triples text with {{origin:main}} slots."""
    ndocs = rng.randint(1, 6)
    nodes = [f"{{{{origin:main}}}}/d{j}#n{k}" for j in range(ndocs) for k in range(2)]
    total = rng.randint(8, 40)
    docs = {j: [] for j in range(ndocs)}
    for _ in range(total):
        s = rng.choice(nodes)
        p = rng.choice(PREDICATES)
        o = rng.choice(nodes + LITERALS)
        docs[rng.randrange(ndocs)].append((s, p, o))
    return docs, nodes


def _nt(term):
    return term if term.startswith('"') else f"<{term}>"


def random_patterns(rng, nodes):
    variables = ["?a", "?b", "?c"]
    out = []
    for _ in range(rng.randint(1, 3)):
        s = rng.choice(variables[:2]) if rng.random() < 0.85 else rng.choice(nodes)
        p = rng.choice(variables[2:] + PREDICATES) if rng.random() < 0.2 else rng.choice(PREDICATES)
        o = rng.choice(variables) if rng.random() < 0.8 else rng.choice(nodes + LITERALS)
        out.append(" ".join(t if t.startswith("?") else _nt(t) for t in (s, p, o)))
    return out


def _manifest(docs):
    resources = {}
    for j, triples in docs.items():
        body = "".join(f"{_nt(s)} <{p}> {_nt(o)} .\n" for s, p, o in triples)
        resources[f"/d{j}"] = turtle(body)
    return {"resources": resources}


def _reachable_triples(server, docs):
    """Oracle for the admitted set: breadth-first over the fixture, following every IRI."""
    seen, queue, triples = {0}, [0], []
    while queue:
        j = queue.pop(0)
        for s, p, o in docs[j]:
            triples.append(tuple(server.expand(t) for t in (s, p, o)))
            for term in (s, o):
                if term.startswith("{{origin:main}}/d"):
                    k = int(term.split("/d")[1].split("#")[0])
                    if k not in seen:
                        seen.add(k)
                        queue.append(k)
    return triples


def _as_terms(triple):
    return tuple(Literal(t[1:-1]) if t.startswith('"') else IRI(t) for t in triple)


@pytest.mark.parametrize("seed", range(100))
def test_random_graph_matches_brute_force(serve, seed):
    rng = random.Random(seed)
    docs, nodes = random_graph(rng)
    server = serve(_manifest(docs))
    pattern_lines = random_patterns(rng, nodes)
    text = f"SEED <{server.url('main', '/d0')}>\n" + "\n".join(server.expand(p) for p in pattern_lines)
    query = parse_query(text)

    execution = Engine(EngineConfig(parallelism=1 + seed % 3)).execute(query)
    rows = execution.run()
    emitted = [frozenset(r.bindings.items()) for r in rows]
    assert len(emitted) == len(set(emitted))

    triples = [_as_terms(t) for t in _reachable_triples(server, docs)]
    expected = brute_force([pattern_tuple(p) for p in query.patterns], triples)
    assert set(emitted) == expected

    # replaying only the provenance documents re-derives each row
    by_doc = {}
    for j, doc_triples in docs.items():
        by_doc[server.url("main", f"/d{j}")] = [_as_terms(tuple(server.expand(t) for t in tr)) for tr in doc_triples]
    for row in rows:
        subset = [t for source in row.provenance for t in by_doc[source]]
        assert frozenset(row.bindings.items()) in brute_force([pattern_tuple(p) for p in query.patterns], subset)


# -- scenario fixtures -----------------------------------------------------------


@pytest.mark.parametrize("variant", ["exploit", "hardened"])
@pytest.mark.parametrize("scenario_id", SCENARIO_IDS)
def test_fixture_rows_match_brute_force(scenario_id, variant):
    ctx = run_scenario(scenario_fixture(scenario_id), variant, keep_admitted=True)
    for execution in ctx.executions:
        patterns = [pattern_tuple(p) for p in execution.query.patterns]
        expected = brute_force(patterns, [quad_tuple(q) for q in execution.admitted])
        emitted = {frozenset(r.bindings.items()) for r in execution.rows}
        delegated = {
            frozenset(r.bindings.items()) for r in execution.rows
            if any(e.endpoint_url in r.provenance for e in execution.report.endpoints)
        }
        assert emitted - delegated == expected - delegated
        assert expected <= emitted


# -- examples ----------------------------------------------------------------------


def _s1_query(server):
    fixture = scenario_fixture("S1")
    return parse_query(server.expand(fixture.read_file("names.rq")), "names")


def test_names_query_permissive_and_hardened():
    from ltqp_guard.harness import ScenarioServer

    with ScenarioServer(scenario_fixture("S1")) as server:
        names = {}
        for name in ("permissive", "hardened"):
            execution = Engine(preset(name)).execute(_s1_query(server))
            names[name] = {r.bindings["n"].lexical for r in execution.run()}
            if name == "hardened":
                events = execution.report.events_of(Vulnerability.UNAUTHORIZED_STATEMENTS)
                assert len(events) == 1
                assert events[0].subject_url == server.url("carol", "/profile.ttl")
                assert "profile.ttl#me" in events[0].detail
    assert names == {"permissive": {"Bob", "Carol", "Dave"}, "hardened": {"Bob", "Carol"}}


def test_no_match_terminates_cleanly(serve):
    server = serve({"resources": {"/d": turtle('<#a> <http://ex.org/p> "x" .\n')}})
    query = parse_query(f"SEED <{server.url('main', '/d')}>\n?s <http://ex.org/none> ?o")
    execution = Engine().execute(query)
    assert execution.run() == []
    assert execution.report.results == 0
    assert [d.status for d in execution.report.documents_fetched] == [200]


def test_rows_stream_before_traversal_ends(serve):
    server = serve({"resources": {
        "/a": turtle('<#a> <http://ex.org/name> "first" . <#a> <http://ex.org/next> <{{origin:main}}/b> .\n'),
        "/b": {"type": "delay", "millis": 300, "then": turtle('<#b> <http://ex.org/name> "second" .\n')},
    }})
    query = parse_query(f"SEED <{server.url('main', '/a')}>\n?s <http://ex.org/name> ?n")
    rows = iter(Engine().execute(query))
    first = next(rows)
    assert first.bindings["n"] == Literal("first")
    assert len(server.requests_to("main", "/b")) == 0
    assert [r.bindings["n"].lexical for r in rows] == ["second"]


def test_limit(serve):
    body = "".join(f'<#s{i}> <http://ex.org/p> "{i}" .\n' for i in range(10))
    server = serve({"resources": {"/d": turtle(body)}})
    query = parse_query(f"SEED <{server.url('main', '/d')}>\nLIMIT 3\n?s <http://ex.org/p> ?o")
    assert len(Engine().execute(query).run()) == 3


def test_strict_mode_faults_and_lenient_continues(serve):
    server = serve({"resources": {
        "/a": turtle('<#a> <http://ex.org/name> "A" . <#a> <http://ex.org/k> <{{origin:main}}/gone> .'
                     ' <#a> <http://ex.org/k> <{{origin:main}}/b> .\n'),
        "/gone": {"type": "notFound"},
        "/b": turtle('<#b> <http://ex.org/name> "B" .\n'),
    }})
    query = parse_query(f"SEED <{server.url('main', '/a')}>\n?s <http://ex.org/name> ?n")
    lenient = Engine().execute(query)
    assert {r.bindings["n"].lexical for r in lenient.run()} == {"A", "B"}
    assert len(lenient.report.events_of(Vulnerability.DOCUMENT_CORRUPTION)) == 1
    strict = Engine(EngineConfig(mode="strict")).execute(query)
    with pytest.raises(EngineFault):
        strict.run()


def test_unsupported_media_type_ignored(serve):
    server = serve({"resources": {
        "/a": turtle('<#a> <http://ex.org/k> <{{origin:main}}/w.html> .\n'),
        "/w.html": turtle("<script>alert(1)</script>", "text/html"),
    }})
    query = parse_query(f"SEED <{server.url('main', '/a')}>\n?s ?p ?o")
    execution = Engine().execute(query)
    execution.run()
    events = execution.report.events_of(Vulnerability.CODE_EXECUTION)
    assert len(events) == 1 and events[0].subject_url.endswith("/w.html")


@pytest.mark.parametrize("scenario_id", SCENARIO_IDS)
def test_every_event_subject_is_known(scenario_id):
    for variant in ("exploit", "hardened"):
        for execution in run_scenario(scenario_fixture(scenario_id), variant).executions:
            report = execution.report
            known = report.fetched_urls() | report.blocked_urls
            for event in report.events:
                assert event.subject_url is None or event.subject_url in known, event


def test_repeated_runs_emit_identical_streams():
    from ltqp_guard.harness import ScenarioServer

    for scenario_id in ("S1", "S8", "S10"):
        fixture = scenario_fixture(scenario_id)
        with ScenarioServer(fixture) as server:
            text = server.expand(fixture.read_file(fixture.queries[0]["file"]))
            streams = [
                [r.line() for r in Engine(EngineConfig(priority_mode="indegree")).execute(parse_query(text)).run()]
                for _ in range(3)
            ]
        assert streams[0] == streams[1] == streams[2]


# -- endpoint discovery and delegation -----------------------------------------------

CAROL_DOC = "https://carol.pods.org/profile"


def _advert(obj):
    return SourcedQuad(Triple(IRI(CAROL_DOC + "#me"), IRI(ENDPOINT_PREDICATE), obj), IRI(CAROL_DOC))


def test_discover_endpoint():
    found = discover_endpoint(_advert(IRI("http://attacker.com/sparql")))
    assert found == EndpointDescriptor("http://attacker.com/sparql", CAROL_DOC)
    reversed_quad = SourcedQuad(
        Triple(IRI("http://attacker.com/sparql"), IRI("http://ex.org/p"), IRI(CAROL_DOC)), IRI(CAROL_DOC)
    )
    assert discover_endpoint(reversed_quad) is None
    events = []
    assert discover_endpoint(_advert(Literal("http://attacker.com/sparql")), events=events) is None
    assert events[0].action.value == "observed"


def _endpoint_server(serve):
    return serve({"origins": {
        "attacker": {"resources": {"/sparql": {"type": "endpointStub", "bindings": ['?t "+1-555-0142"']}}},
        "bob": {"resources": {"/p": turtle("")}},
    }})


def _seeds(server):
    bob_doc = server.url("bob", "/p")
    return [({"who": IRI(bob_doc + "#me")}, frozenset({bob_doc}))]


PHONE_PATTERN = parse_pattern("?who <http://xmlns.com/foaf/0.1/phone> ?t")


@pytest.mark.parametrize(
    "same_origin, allow_list, sent",
    [(False, False, True), (True, False, False), (True, True, True)],
)
def test_delegation_rules(serve, same_origin, allow_list, sent):
    server = _endpoint_server(serve)
    endpoint = EndpointDescriptor(server.url("attacker", "/sparql"), server.url("attacker", "/ad"))
    allowed = frozenset({Origin.parse(server.base_urls["attacker"])}) if allow_list else frozenset()
    config = EngineConfig(hybrid_enabled=True, same_origin_intermediate=same_origin, endpoint_allow_list=allowed)
    events = []
    outcome = delegate_pattern(endpoint, PHONE_PATTERN, _seeds(server), config, Dereferencer(), events)
    assert isinstance(outcome, Delegation)
    log = server.endpoint_log()
    assert bool(log) is sent
    if sent:
        assert server.url("bob", "/p#me") in log[0]["bindings"]
        assert [r[0]["t"] for r in outcome.rows] == [Literal("+1-555-0142")]
        assert endpoint.endpoint_url in outcome.rows[0][1]
    else:
        assert outcome.blocked and events[0].vulnerability is Vulnerability.LEAKAGE


def test_delegation_failure_is_not_fatal(serve):
    server = serve({"resources": {"/sparql": {"type": "notFound"}}})
    endpoint = EndpointDescriptor(server.url("main", "/sparql"), server.url("main", "/ad"))
    config = EngineConfig(hybrid_enabled=True)
    seeds = [({"who": IRI(server.url("main", "/x"))}, frozenset({server.url("main", "/x")}))]
    events = []
    outcome = delegate_pattern(endpoint, PHONE_PATTERN, seeds, config, Dereferencer(), events)
    assert outcome.failed and events[0].vulnerability is Vulnerability.NONE


def test_serialized_rows_use_term_syntax():
    row_line = "\t".join(f"?{k} {serialize_term(v)}" for k, v in sorted({"b": Literal("x"), "a": IRI("http://a/")}.items()))
    assert row_line == '?a <http://a/>\t?b "x"'
    assert Variable("a").name == "a"
