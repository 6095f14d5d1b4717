"""Query evaluation during link traversal.

Documents are fetched one at a time (or by a small worker pool), parsed as
a stream, and every admitted quad is probed against the patterns at once,
so result rows appear while traversal is still running.
"""

from __future__ import annotations

import itertools
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Union
from urllib.parse import urlencode

from .fetch import (
    SEED,
    Dereferencer,
    FetchError,
    HttpError,
    RedirectLimitExceeded,
    SchemeBlocked,
    Session,
    SessionStore,
    TransportError,
    token_digest,
)
from .model import IRI, Action, MalformedIri, SecurityEvent, SourcedQuad, Vulnerability, origin_of, strip_fragment
from .parser import DocumentParser, LimitExceeded, RdfSyntaxError
from .policy import ENDPOINT_PREDICATE, EngineConfig, config_to_dict, link_legitimate, quad_admissible, session_allowed
from .query import (
    Query,
    QuerySyntaxError,
    ResultRow,
    TriplePattern,
    format_bindings,
    join_patterns,
    match_pattern,
    parse_bindings,
)
from .report import AuditReport, DocumentRecord
from .traversal import SEED_VIA, Frontier, LinkQueueEntry, enqueue, extract_links

__all__ = [
    "RDF_MEDIA_TYPES",
    "EndpointDescriptor",
    "Delegation",
    "EngineFault",
    "Engine",
    "QueryExecution",
    "discover_endpoint",
    "delegate_pattern",
    "evaluate",
]

RDF_MEDIA_TYPES = frozenset({"text/turtle", "application/turtle", "application/x-turtle", "application/n-triples"})


class EngineFault(Exception):
    """A fetch or parse fault surfaced in strict mode."""

    def __init__(self, message: str, url: str = ""):
        super().__init__(message)
        self.url = url


@dataclass(frozen=True)
class EndpointDescriptor:
    endpoint_url: str
    discovered_in: str


def discover_endpoint(
    quad: SourcedQuad,
    predicate: str = ENDPOINT_PREDICATE,
    events: Optional[list] = None,
) -> Optional[EndpointDescriptor]:
    if quad.triple.predicate.value != predicate:
        return None
    target = quad.triple.object
    if not isinstance(target, IRI):
        if events is not None:
            events.append(
                SecurityEvent(
                    Vulnerability.LEAKAGE,
                    Action.OBSERVED,
                    "malformed endpoint advertisement ignored (object is not an IRI)",
                    quad.source.value,
                )
            )
        return None
    return EndpointDescriptor(target.value, quad.source.value)


@dataclass
class Delegation:
    blocked: bool = False
    failed: bool = False
    rows: list = field(default_factory=list)
    request_url: Optional[str] = None


def delegate_pattern(
    endpoint: EndpointDescriptor,
    pattern: TriplePattern,
    seeds: Sequence[tuple],
    config: EngineConfig,
    dereferencer: Optional[Dereferencer] = None,
    events: Optional[list] = None,
) -> Delegation:
    """Send one pattern plus seed bindings to an endpoint and join the answers.

    ``seeds`` are ``(binding, provenance)`` pairs. Returned rows carry the
    seed provenance extended with the endpoint URL.
    """
    if not config.hybrid_enabled:
        raise ValueError("hybrid evaluation is disabled in this configuration")
    events = events if events is not None else []
    dereferencer = dereferencer or Dereferencer(config.fetch_policy)
    try:
        target = origin_of(endpoint.endpoint_url)
    except MalformedIri:
        return Delegation(failed=True)

    if config.same_origin_intermediate and target not in config.endpoint_allow_list:
        foreign = set()
        for _binding, provenance in seeds:
            for source in provenance:
                source_origin = origin_of(source)
                if source_origin != target:
                    foreign.add(str(source_origin))
        if foreign:
            events.append(
                SecurityEvent(
                    Vulnerability.LEAKAGE,
                    Action.BLOCKED,
                    f"intermediate results from {', '.join(sorted(foreign))} not sent to endpoint at {target}",
                    endpoint.endpoint_url,
                )
            )
            return Delegation(blocked=True)

    lines = "\n".join(format_bindings(b) for b, _ in seeds if b)
    sep = "&" if "?" in endpoint.endpoint_url else "?"
    url = endpoint.endpoint_url + sep + urlencode({"pattern": str(pattern), "bindings": lines})
    try:
        doc = dereferencer.dereference(
            url,
            referrer_origin=origin_of(endpoint.discovered_in),
            cache_mode="off",
            events=events,
            allow_session=lambda t, r, s: session_allowed(t, r, s, config),
            accept="text/plain",
        )
        try:
            body = doc.body.read(config.parse_limits.max_document_bytes + 1)
        finally:
            doc.close()
        if len(body) > config.parse_limits.max_document_bytes:
            raise QuerySyntaxError("endpoint answer too large")
        answers = parse_bindings(body.decode("utf-8"))
    except (FetchError, QuerySyntaxError, UnicodeDecodeError) as exc:
        events.append(
            SecurityEvent(
                Vulnerability.NONE,
                Action.OBSERVED,
                f"endpoint unusable, continuing with traversal only: {exc}",
                endpoint.endpoint_url,
            )
        )
        return Delegation(failed=True, request_url=url)

    rows = []
    needed = pattern.variables
    for binding, provenance in seeds:
        for answer in answers:
            if any(binding.get(k, v) != v for k, v in answer.items()):
                continue
            merged = {**binding, **answer}
            if all(name in merged for name in needed):
                rows.append((merged, frozenset(provenance) | {endpoint.endpoint_url}))
    return Delegation(rows=rows, request_url=url)


class QueryExecution:
    """One running query. Iterate it for rows; :attr:`report` fills in as it runs."""

    def __init__(
        self,
        query: Query,
        config: EngineConfig,
        dereferencer: Dereferencer,
        sandbox_id: str,
        keep_admitted: bool = False,
    ):
        self.query = query
        self.config = config
        self.dereferencer = dereferencer
        self.sandbox_id = sandbox_id
        snapshot = config_to_dict(config)
        snapshot["sessions"] = [
            {"origin": str(s.origin), "tokenSha256": token_digest(s.token)} for s in dereferencer.sessions
        ]
        self.report = AuditReport(query.id, snapshot)
        self.rows: list[ResultRow] = []
        self.admitted: Optional[list[SourcedQuad]] = [] if keep_admitted else None
        self.admitted_count = 0
        self._events = self.report.events
        self._frontier = Frontier(config.priority_mode)
        self._matches: list[list] = [[] for _ in query.patterns]
        self._matched: set = set()
        self._emitted: dict = {}
        self._endpoints: dict[str, EndpointDescriptor] = {}
        self._lock = threading.RLock()
        self._started = False

    def __iter__(self) -> Iterator[ResultRow]:
        if self._started:
            raise RuntimeError("a query execution can only be iterated once")
        self._started = True
        return self._generate()

    def run(self) -> list[ResultRow]:
        for _ in self:
            pass
        return self.rows

    @property
    def dereference_order(self) -> list[str]:
        return [d.request_url or d.url for d in self.report.documents_fetched if d.kind == "document"]

    # -- pipeline ------------------------------------------------------------

    def _limit_reached(self) -> bool:
        return self.query.limit is not None and len(self._emitted) >= self.query.limit

    def _generate(self) -> Iterator[ResultRow]:
        start = time.monotonic()
        try:
            if self._limit_reached():
                return
            for seed in self.query.seeds:
                self._offer(LinkQueueEntry(strip_fragment(seed), 0, SEED_VIA))
            stages = [self._traverse_parallel() if self.config.parallelism > 1 else self._traverse()]
            if self.config.hybrid_enabled:
                stages.append(self._hybrid())
            for stage in stages:
                for row in stage:
                    yield row
                    if self._limit_reached():
                        stage.close()
                        return
        finally:
            self.report.results = len(self._emitted)
            self.report.wall_millis = (time.monotonic() - start) * 1000.0

    def _offer(self, entry: LinkQueueEntry) -> None:
        result = enqueue(
            self._frontier, entry, self.config.budgets, self._events, self.config.fetch_policy.scheme_allowed
        )
        if result.reason in ("scheme", "depth"):
            self.report.blocked_urls.add(entry.target)

    def _budget_event(self) -> None:
        if len(self._frontier):
            self._events.append(
                SecurityEvent(
                    Vulnerability.TRAVERSAL_TRAP,
                    Action.OBSERVED,
                    f"document budget of {self.config.budgets.max_documents} reached "
                    f"with {len(self._frontier)} links pending",
                    self.report.documents_fetched[-1].url if self.report.documents_fetched else None,
                )
            )

    def _next_entry(self) -> Optional[LinkQueueEntry]:
        with self._lock:
            entry = self._frontier.pop()
            if entry is not None:
                self._frontier.mark_dereferenced(entry.target)
            return entry

    def _traverse(self) -> Iterator[ResultRow]:
        attempts = 0
        while True:
            if attempts >= self.config.budgets.max_documents:
                self._budget_event()
                return
            entry = self._next_entry()
            if entry is None:
                return
            attempts += 1
            opened = self._open(entry)
            if opened is None:
                continue
            doc, record = opened
            try:
                for quad in self._parse(doc, entry, record):
                    yield from self._ingest(quad)
            finally:
                doc.close()

    def _fetch_all(self, entry: LinkQueueEntry) -> list[SourcedQuad]:
        opened = self._open(entry)
        if opened is None:
            return []
        doc, record = opened
        try:
            return list(self._parse(doc, entry, record))
        finally:
            doc.close()

    def _traverse_parallel(self) -> Iterator[ResultRow]:
        """Fetch and parse on worker threads; quads are admitted and joined here, one document at a time."""
        attempts = 0
        width = self.config.parallelism
        with ThreadPoolExecutor(max_workers=width) as pool:
            inflight: dict = {}
            order = itertools.count()
            try:
                while True:
                    while len(inflight) < width and attempts < self.config.budgets.max_documents:
                        entry = self._next_entry()
                        if entry is None:
                            break
                        attempts += 1
                        inflight[pool.submit(self._fetch_all, entry)] = next(order)
                    if not inflight:
                        if attempts >= self.config.budgets.max_documents:
                            self._budget_event()
                        return
                    done, _ = wait(inflight, return_when=FIRST_COMPLETED)
                    for future in sorted(done, key=inflight.get):
                        del inflight[future]
                        quads = future.result()
                        with self._lock:
                            rows = [row for quad in quads for row in self._ingest(quad)]
                        yield from rows
            finally:
                for future in inflight:
                    future.cancel()

    def _open(self, entry: LinkQueueEntry):
        referrer = SEED if entry.via == SEED_VIA else origin_of(entry.via)
        config = self.config
        try:
            doc = self.dereferencer.dereference(
                entry.target,
                referrer,
                cache_mode=config.cache_mode,
                sandbox_id=self.sandbox_id,
                events=self._events,
                allow_session=lambda t, r, s: session_allowed(t, r, s, config),
            )
        except SchemeBlocked:
            self.report.blocked_urls.add(entry.target)
            return None
        except FetchError as exc:
            self._fetch_failed(entry, exc)
            return None
        record = DocumentRecord(
            doc.final_url.value,
            doc.status,
            from_cache=doc.from_cache,
            depth=entry.depth,
            request_url=entry.target,
            media_type=doc.media_type,
        )
        with self._lock:
            self.report.documents_fetched.append(record)
            self._frontier.mark_dereferenced(doc.final_url.value)
        if config.media_type_guard and doc.media_type not in RDF_MEDIA_TYPES:
            self._events.append(
                SecurityEvent(
                    Vulnerability.CODE_EXECUTION,
                    Action.OBSERVED,
                    f"unsupported content ignored ({doc.media_type or 'no media type'})",
                    doc.final_url.value,
                )
            )
            doc.close()
            return None
        return doc, record

    def _fetch_failed(self, entry: LinkQueueEntry, exc: FetchError) -> None:
        status = exc.status if isinstance(exc, HttpError) else 0
        url = exc.url or entry.target
        with self._lock:
            self.report.documents_fetched.append(
                DocumentRecord(url, status, depth=entry.depth, request_url=entry.target)
            )
        if isinstance(exc, RedirectLimitExceeded):
            pass  # the dereferencer already recorded a trap event
        elif status in (401, 403):
            self._events.append(
                SecurityEvent(Vulnerability.NONE, Action.OBSERVED, f"access denied (HTTP {status})", url)
            )
        else:
            self._events.append(
                SecurityEvent(Vulnerability.DOCUMENT_CORRUPTION, Action.WARNED, f"document unavailable: {exc}", url)
            )
        if self.config.mode == "strict":
            raise EngineFault(str(exc), url) from exc

    def _parse(self, doc, entry: LinkQueueEntry, record: DocumentRecord) -> Iterator[SourcedQuad]:
        parser = DocumentParser(
            doc.body, doc.final_url, self.config.parse_limits, self.config.mode, entry.depth, doc.fetched_at
        )
        try:
            for quad in parser:
                record.quads += 1
                yield quad
        except (LimitExceeded, RdfSyntaxError) as exc:
            raise EngineFault(f"{record.url}: {exc}", record.url) from exc
        except TransportError as exc:
            self._events.append(
                SecurityEvent(
                    Vulnerability.DOCUMENT_CORRUPTION, Action.WARNED, f"body read failed: {exc}", record.url
                )
            )
            if self.config.mode == "strict":
                raise EngineFault(str(exc), record.url) from exc
        finally:
            record.bytes = parser.outcome.bytes_consumed
            self._events.extend(parser.outcome.events)

    def _ingest(self, quad: SourcedQuad) -> Iterator[ResultRow]:
        config = self.config
        rules = config.content_policy
        decision = quad_admissible(quad, rules)
        advert = discover_endpoint(quad, config.endpoint_predicate, self._events)
        if advert is not None:
            self.report.endpoints.append(advert)
            self._endpoints.setdefault(advert.endpoint_url, advert)
        else:
            # an advertised endpoint is an interface, not a document to traverse
            for entry in extract_links((quad,), self.query.criterion):
                legit = not config.link_legitimacy or (decision.admitted and link_legitimate(entry))
                self._frontier.note_backlink(entry.target, entry.via, legit)
                self._offer(entry)
        if not decision:
            self._events.append(decision.event)
            return
        self.admitted_count += 1
        if self.admitted is not None:
            self.admitted.append(quad)
        yield from self._probe(quad)

    def _probe(self, quad: SourcedQuad) -> Iterator[ResultRow]:
        source = quad.source.value
        fresh = []
        for index, pattern in enumerate(self.query.patterns):
            binding = match_pattern(pattern, quad)
            if binding is None:
                continue
            key = (index, quad.triple, source)
            if key in self._matched:
                continue
            self._matched.add(key)
            self._matches[index].append((binding, source))
            fresh.append((index, binding))
        for index, binding in fresh:
            for full, sources in join_patterns(self._matches, fixed=(index, binding, source)):
                row = self._emit(full, sources)
                if row is not None:
                    yield row

    def _emit(self, binding: dict, sources: frozenset) -> Optional[ResultRow]:
        key = frozenset(binding.items())
        existing = self._emitted.get(key)
        if existing is not None:
            if sources != existing.provenance:
                extra = self.report.extra_provenance.setdefault(format_bindings(binding), set())
                extra.update(sources - existing.provenance)
            return None
        row = ResultRow(dict(binding), frozenset(sources))
        self._emitted[key] = row
        self.rows.append(row)
        return row

    def _hybrid(self) -> Iterator[ResultRow]:
        """Bind-join each later pattern through every discovered endpoint."""
        patterns = self.query.patterns
        for advert in list(self._endpoints.values()):
            for index in range(1, len(patterns)):
                seeds = list(join_patterns(self._matches[:index]))
                if not seeds:
                    continue
                outcome = delegate_pattern(
                    advert, patterns[index], seeds, self.config, self.dereferencer, self._events
                )
                if outcome.blocked:
                    self.report.blocked_urls.add(advert.endpoint_url)
                if outcome.request_url is not None:
                    self.report.documents_fetched.append(
                        DocumentRecord(advert.endpoint_url, 0 if outcome.failed else 200,
                                       request_url=outcome.request_url, kind="endpoint")
                    )
                later = self._matches[index + 1:]
                for binding, provenance in outcome.rows:
                    for full, sources in join_patterns(later, start=(binding, provenance)):
                        row = self._emit(full, sources)
                        if row is not None:
                            yield row


class Engine:
    """Holds the HTTP client, sessions and cache shared by successive queries."""

    def __init__(
        self,
        config: EngineConfig = EngineConfig(),
        sessions: Union[SessionStore, Iterable[Session]] = (),
        dereferencer: Optional[Dereferencer] = None,
    ):
        self.config = config
        store = sessions if isinstance(sessions, SessionStore) else SessionStore(sessions)
        self.dereferencer = dereferencer or Dereferencer(config.fetch_policy, store)
        self._runs = itertools.count(1)

    def execute(self, query: Query, config: Optional[EngineConfig] = None, keep_admitted: bool = False) -> QueryExecution:
        config = config or self.config
        self.dereferencer.policy = config.fetch_policy
        return QueryExecution(query, config, self.dereferencer, f"q{next(self._runs)}", keep_admitted)


def evaluate(
    query: Query,
    config: EngineConfig = EngineConfig(),
    sessions: Iterable[Session] = (),
    keep_admitted: bool = False,
) -> QueryExecution:
    return Engine(config, sessions).execute(query, keep_admitted=keep_admitted)
