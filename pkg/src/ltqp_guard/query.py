"""Basic graph pattern queries, the query file format and binding lines."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

from .model import (
    IRI,
    Literal,
    MalformedIri,
    MalformedTerm,
    SourcedQuad,
    Term,
    parse_term,
    serialize_term,
)
from .model import IRIREF, STRING, LANGTAG, BLANK
from .traversal import Criterion

__all__ = [
    "Variable",
    "TriplePattern",
    "Query",
    "ResultRow",
    "QuerySyntaxError",
    "parse_query",
    "parse_pattern",
    "match_pattern",
    "join_patterns",
    "format_bindings",
    "parse_bindings",
]

_VAR_NAME = re.compile(r"[A-Za-z0-9_]+")


class QuerySyntaxError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True, slots=True)
class Variable:
    name: str

    def __post_init__(self):
        if not _VAR_NAME.fullmatch(self.name):
            raise QuerySyntaxError(f"bad variable name ?{self.name}")

    def __str__(self) -> str:
        return f"?{self.name}"


Slot = Union[Term, Variable]


@dataclass(frozen=True)
class TriplePattern:
    subject: Slot
    predicate: Slot
    object: Slot

    def __post_init__(self):
        if isinstance(self.subject, Literal):
            raise QuerySyntaxError("literal in subject position")
        if not isinstance(self.predicate, (IRI, Variable)):
            raise QuerySyntaxError("predicate must be an IRI or a variable")

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(s.name for s in (self.subject, self.predicate, self.object) if isinstance(s, Variable)))

    def __str__(self) -> str:
        return " ".join(_slot_text(s) for s in (self.subject, self.predicate, self.object)) + " ."


def _slot_text(slot: Slot) -> str:
    return str(slot) if isinstance(slot, Variable) else serialize_term(slot)


@dataclass(frozen=True)
class Query:
    seeds: tuple
    patterns: tuple
    criterion: Criterion = Criterion()
    limit: Optional[int] = None
    id: str = "query"

    def __post_init__(self):
        if not self.seeds:
            raise QuerySyntaxError("a query needs at least one SEED")
        if not self.patterns:
            raise QuerySyntaxError("a query needs at least one pattern")

    @property
    def variables(self) -> tuple[str, ...]:
        names: dict = {}
        for pattern in self.patterns:
            names.update(dict.fromkeys(pattern.variables))
        return tuple(sorted(names))


@dataclass
class ResultRow:
    bindings: dict
    provenance: frozenset
    emitted_at: float = field(default_factory=time.monotonic)

    @property
    def key(self) -> frozenset:
        return frozenset(self.bindings.items())

    def line(self) -> str:
        return format_bindings(self.bindings)


# -- query file format ---------------------------------------------------------

_PNAME = r"([A-Za-z][A-Za-z0-9_.\-]*)?:([A-Za-z0-9_:%](?:[A-Za-z0-9_.\-:%]*[A-Za-z0-9_\-:%])?)?"
_QTOKEN = re.compile(
    rf"\s*(?:(?P<var>\?[A-Za-z0-9_]+)|(?P<term>{IRIREF}|{STRING}(?:{LANGTAG}|\^\^{IRIREF})?|{BLANK})"
    rf"|(?P<pname>{_PNAME})|(?P<dot>\.)|(?P<comment>#.*))"
)


def _tokens(text: str, lineno: int) -> list:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _QTOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise QuerySyntaxError(f"unexpected text {text[pos:pos + 30]!r}", lineno)
        pos = m.end()
        kind = m.lastgroup
        if kind == "comment":
            break
        out.append((kind, m.group(kind)))
    return out


def _slot(kind: str, text: str, prefixes: dict, lineno: int) -> Slot:
    if kind == "var":
        return Variable(text[1:])
    if kind == "pname":
        prefix, _, local = text.partition(":")
        if prefix not in prefixes:
            raise QuerySyntaxError(f"undeclared prefix {prefix!r}", lineno)
        return IRI(prefixes[prefix] + local)
    if kind == "term":
        try:
            term = parse_term(text, scope="query")
        except (MalformedTerm, MalformedIri) as exc:
            raise QuerySyntaxError(str(exc), lineno) from exc
        if isinstance(term, IRI) and term.value.startswith("?"):
            raise QuerySyntaxError("relative IRI in query", lineno)
        return term
    raise QuerySyntaxError(f"unexpected {text!r}", lineno)


def parse_pattern(text: str, prefixes: Optional[dict] = None, lineno: int = 0) -> TriplePattern:
    toks = [t for t in _tokens(text, lineno)]
    if toks and toks[-1][0] == "dot":
        toks = toks[:-1]
    if len(toks) != 3 or any(k == "dot" for k, _ in toks):
        raise QuerySyntaxError("a pattern has exactly three terms", lineno)
    try:
        return TriplePattern(*(_slot(k, v, prefixes or {}, lineno) for k, v in toks))
    except MalformedIri as exc:
        raise QuerySyntaxError(str(exc), lineno) from exc


def parse_query(text: str, query_id: str = "query") -> Query:
    """Parse the line-oriented query format.

    ``SEED <iri>`` lines name seed documents, ``PREFIX p: <iri>`` declares a
    prefix, ``FOLLOW all`` or ``FOLLOW <p> ...`` picks the reachability
    criterion, ``LIMIT n`` caps the result count; every other non-blank line
    is one triple pattern with ``?var`` allowed anywhere. ``#`` starts a comment.
    """
    seeds, patterns, prefixes = [], [], {}
    criterion, limit = Criterion(), None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        keyword, _, rest = line.partition(" ")
        keyword = keyword.upper()
        if keyword == "SEED":
            toks = _tokens(rest, lineno)
            if len(toks) != 1 or toks[0][0] != "term" or not toks[0][1].startswith("<"):
                raise QuerySyntaxError("SEED takes one <iri>", lineno)
            seeds.append(_slot("term", toks[0][1], prefixes, lineno).value)
        elif keyword == "PREFIX":
            m = re.fullmatch(r"([A-Za-z][A-Za-z0-9_.\-]*)?:\s*<([^>]*)>\s*\.?", rest.strip())
            if not m:
                raise QuerySyntaxError("PREFIX takes 'p: <iri>'", lineno)
            prefixes[m.group(1) or ""] = m.group(2)
        elif keyword == "FOLLOW":
            if rest.strip().lower() == "all":
                criterion = Criterion()
            else:
                preds = [_slot(k, v, prefixes, lineno) for k, v in _tokens(rest, lineno)]
                if not preds or not all(isinstance(p, IRI) for p in preds):
                    raise QuerySyntaxError("FOLLOW takes 'all' or predicate IRIs", lineno)
                criterion = Criterion.match(p.value for p in preds)
        elif keyword == "LIMIT":
            if not rest.strip().isdigit():
                raise QuerySyntaxError("LIMIT takes a non-negative integer", lineno)
            limit = int(rest.strip())
        else:
            patterns.append(parse_pattern(line, prefixes, lineno))
    return Query(tuple(seeds), tuple(patterns), criterion, limit, query_id)


# -- matching ---------------------------------------------------------------


def match_pattern(pattern: TriplePattern, quad: SourcedQuad) -> Optional[dict]:
    """Bindings making ``pattern`` equal to the quad's triple, or None."""
    triple = quad.triple
    binding: dict = {}
    for slot, term in ((pattern.subject, triple.subject), (pattern.predicate, triple.predicate), (pattern.object, triple.object)):
        if isinstance(slot, Variable):
            bound = binding.get(slot.name)
            if bound is None:
                binding[slot.name] = term
            elif bound != term:
                return None
        elif slot != term:
            return None
    return binding


def _compatible(a: dict, b: dict) -> bool:
    for name, value in b.items():
        other = a.get(name)
        if other is not None and other != value:
            return False
    return True


def join_patterns(
    matches: Sequence[Sequence[tuple]],
    fixed: Optional[tuple] = None,
    start: Optional[tuple] = None,
) -> Iterator[tuple]:
    """Nested-loop join over per-pattern match lists.

    ``matches[i]`` holds ``(binding, source)`` pairs for pattern ``i``.
    ``fixed=(i, binding, source)`` pins pattern ``i`` to one match;
    ``start=(binding, sources)`` seeds the join. Yields ``(binding, sources)``.
    """
    order = list(range(len(matches)))
    if fixed is not None:
        order.remove(fixed[0])
    binding0, sources0 = start if start is not None else ({}, frozenset())
    if fixed is not None:
        if not _compatible(binding0, fixed[1]):
            return
        binding0 = {**binding0, **fixed[1]}
        sources0 = sources0 | {fixed[2]}

    def extend(depth: int, binding: dict, sources: frozenset):
        if depth == len(order):
            yield binding, sources
            return
        for candidate, source in matches[order[depth]]:
            if _compatible(binding, candidate):
                yield from extend(depth + 1, {**binding, **candidate}, sources | {source})

    yield from extend(0, binding0, sources0)


# -- binding lines -------------------------------------------------------------


def format_bindings(bindings: dict) -> str:
    """One binding per line: ``?var TERM`` cells, tab separated, sorted by name."""
    return "\t".join(f"?{name} {serialize_term(bindings[name])}" for name in sorted(bindings))


_CELL = re.compile(r"\?([A-Za-z0-9_]+)\s+(.*)")


def parse_bindings(text: str) -> list[dict]:
    rows = []
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        row = {}
        for cell in line.split("\t"):
            m = _CELL.fullmatch(cell.strip())
            if not m:
                raise QuerySyntaxError(f"bad binding cell {cell[:60]!r}", lineno)
            try:
                row[m.group(1)] = parse_term(m.group(2), scope="endpoint")
            except (MalformedTerm, MalformedIri) as exc:
                raise QuerySyntaxError(str(exc), lineno) from exc
        rows.append(row)
    return rows
