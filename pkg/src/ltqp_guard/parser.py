"""Bounded streaming parser for a Turtle subset.

Accepted syntax: N-Triples statements, ``@base <iri> .`` and ``@prefix p: <iri> .``
directives, prefixed names in any term position, ``;`` and ``,`` lists, ``a``
for rdf:type, ``#`` comments, and relative IRIs resolved against the effective
base. No collections, blank-node property lists, or numeric and boolean shorthands.

Every early stop is classified: size, count and time limits as
``System hogging``, syntax and encoding problems as ``Document Corruption``.
"""

from __future__ import annotations

import io
import re
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Iterator, Optional, Union

from .model import (
    IRI,
    Action,
    BlankNode,
    Literal,
    MalformedIri,
    MalformedTerm,
    SecurityEvent,
    SourcedQuad,
    Triple,
    Vulnerability,
    resolve_relative,
    unescape_string,
)

__all__ = [
    "ParseLimits",
    "ParseOutcome",
    "RdfSyntaxError",
    "LimitExceeded",
    "DocumentParser",
    "parse_document_stream",
    "grammar",
]

CHUNK = 64 * 1024


@dataclass(frozen=True)
class ParseLimits:
    max_iri_bytes: int = 1_048_576
    max_literal_bytes: int = 1_048_576
    max_document_bytes: int = 16_777_216
    max_quads_per_document: int = 100_000
    parse_budget_millis: int = 10_000

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


class RdfSyntaxError(Exception):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class LimitExceeded(Exception):
    def __init__(self, limit: str, value: int, offset: int):
        super().__init__(f"{limit}={value} exceeded at byte {offset}")
        self.limit = limit
        self.value = value
        self.offset = offset


@dataclass
class ParseOutcome:
    quads: list = field(default_factory=list)
    events: list = field(default_factory=list)
    truncated: bool = False
    bytes_consumed: int = 0
    quad_count: int = 0


def grammar() -> str:
    return __doc__.split("\n\n")[1]


# Token kinds
IRIREF, STRING, AT, DTYPE, PNAME, BLANK, DOT, SEMI, COMMA, KW_A = range(10)
RDF_TYPE = IRI("http://www.w3.org/1999/02/22-rdf-syntax-ns#type")

_WS = re.compile(rb"(?:[ \t\r\n]+|#[^\r\n]*(?:\r?\n|\r))*")
_COMMENT_OPEN = re.compile(rb"#[^\r\n]*\Z")
_PN = rb"[A-Za-z\x80-\xff](?:[A-Za-z0-9_.\-\x80-\xff]*[A-Za-z0-9_\-\x80-\xff])?"
_LOCAL = rb"[A-Za-z0-9_:%\x80-\xff](?:[A-Za-z0-9_.\-:%\x80-\xff]*[A-Za-z0-9_\-:%\x80-\xff])?"
_TOKEN_SRC = (
    rb'<(?P<iri>(?:[^\x00-\x20<>"{}|^`\\]|\\u[0-9A-Fa-f]{4}|\\U[0-9A-Fa-f]{8})*)>'
    rb'|"(?P<str>(?:[^"\\\n\r]|\\.)*)"'
    rb"|@(?P<at>[A-Za-z]+(?:-[A-Za-z0-9]+)*)"
    rb"|(?P<dt>\^\^)"
    rb"|(?P<pn>(?P<pfx>" + _PN + rb")?:(?P<loc>" + _LOCAL + rb")?)"
    rb"|_:(?P<bn>[A-Za-z0-9_\x80-\xff](?:[A-Za-z0-9_.\-\x80-\xff]*[A-Za-z0-9_\-\x80-\xff])?)"
    rb"|(?P<dot>\.)"
    rb"|(?P<semi>;)"
    rb"|(?P<comma>,)"
    rb"|(?P<kw>a)(?=[ \t\r\n<\"_:\[])"
)
_TOKEN = re.compile(_TOKEN_SRC)
# whitespace plus token in one match; used when the token cannot run past the buffer
_FAST_TOKEN = re.compile(rb"[ \t\r\n]*(?:" + _TOKEN_SRC + rb")")
_TERM_CACHE_SIZE = 4096
_IRI_FORBIDDEN = re.compile(rb'[\x00-\x20<"{}|^`]')
_LINE_BREAK = re.compile(rb"[\r\n]")
_EXTENDABLE = {"at", "pn", "bn"}
_PARTIAL_IRI = re.compile(rb'<(?:[^\x00-\x20<>"{}|^`\\]|\\u[0-9A-Fa-f]{0,4}|\\U[0-9A-Fa-f]{0,8}|\\)*\Z')
_PARTIAL_STRING = re.compile(rb'"(?:[^"\\\n\r]|\\.)*\\?\Z', re.S)


def _chunks(stream) -> Iterator[bytes]:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        yield bytes(stream)
        return
    if hasattr(stream, "read"):
        read = getattr(stream, "read1", None) or stream.read
        while True:
            chunk = read(CHUNK)
            if not chunk:
                return
            yield chunk
    else:
        for chunk in stream:
            if chunk:
                yield chunk


class DocumentParser:
    """Iterate a document's quads as they are parsed.

    Iteration stops at end of input or at the first limit or syntax problem.
    In ``lenient`` mode the stop is recorded in :attr:`outcome` and iteration
    ends normally; in ``strict`` mode the error is raised to the caller.
    """

    def __init__(
        self,
        stream: Union[bytes, BinaryIO, Iterable[bytes]],
        base: Union[IRI, str],
        limits: ParseLimits = ParseLimits(),
        mode: str = "lenient",
        depth: int = 0,
        fetched_at: Optional[float] = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        if mode not in ("strict", "lenient"):
            raise ValueError(f"unknown parse mode {mode!r}")
        self.source = base if isinstance(base, IRI) else IRI(base)
        self.limits = limits
        self.mode = mode
        self.depth = depth
        self.fetched_at = fetched_at if fetched_at is not None else clock()
        self.outcome = ParseOutcome()
        self._clock = clock
        self._chunks = _chunks(stream)
        self._buf = b""
        self._pos = 0
        self._offset = 0  # absolute offset of _buf[0]
        self._eof = False
        self._over_limit = False
        self._deadline = clock() + limits.parse_budget_millis / 1000.0
        self._base = self.source.value
        self._prefixes: dict[str, str] = {}
        self._pending_at = -1  # absolute offset of an unterminated IRI/literal token
        self._scanned = 0  # absolute offset up to which that token was checked
        self._terms: dict[str, IRI] = {}  # resolved IRIs under the current base
        self._error: Optional[Exception] = None

    # -- input -------------------------------------------------------------

    def _fill(self) -> bool:
        """Pull one more chunk into the buffer. False when nothing more can arrive."""
        if self._eof:
            return False
        self._check_time()
        if self._over_limit:
            self._eof = True
            return False
        try:
            chunk = next(self._chunks)
        except StopIteration:
            self._eof = True
            return False
        room = self.limits.max_document_bytes - self.outcome.bytes_consumed
        if len(chunk) > room:
            chunk = chunk[:room]
            self._over_limit = True
        self.outcome.bytes_consumed += len(chunk)
        if self._pos:
            self._offset += self._pos
            self._buf = self._buf[self._pos :]
            self._pos = 0
        self._buf += chunk
        self._check_time()
        return True

    def _check_time(self):
        if self._clock() > self._deadline:
            self._raise_limit("parseBudgetMillis", self.limits.parse_budget_millis)

    def _raise_limit(self, name: str, value: int):
        raise LimitExceeded(name, value, self._offset + self._pos)

    def _raise_syntax(self, message: str):
        raise RdfSyntaxError(message, self._offset + self._pos)

    def _at_end_of_data(self):
        if self._over_limit:
            self._raise_limit("maxDocumentBytes", self.limits.max_document_bytes)

    # -- lexer -------------------------------------------------------------

    def _skip_ws(self) -> bool:
        """Skip whitespace and comments; False at end of input."""
        while True:
            m = _WS.match(self._buf, self._pos)
            self._pos = m.end()
            if self._pos < len(self._buf):
                if _COMMENT_OPEN.match(self._buf, self._pos):
                    # unterminated comment at buffer end: discard it and keep skipping
                    self._offset += len(self._buf)
                    self._buf, self._pos = b"#", 0
                    self._offset -= 1
                    if not self._fill():
                        self._pos = len(self._buf)
                        return False
                    continue
                return True
            if not self._fill():
                return False

    def _token(self):
        m = _FAST_TOKEN.match(self._buf, self._pos)
        if m is not None and m.end() < len(self._buf):
            self._pos = m.end()
            return self._classify(m)
        if not self._skip_ws():
            return None
        while True:
            buf, pos = self._buf, self._pos
            if self._pending_at == self._offset + pos and not self._eof:
                # an unterminated IRI or literal seen before: only look at the new bytes
                tail = self._scanned - self._offset
                closer = b">" if buf[pos:pos + 1] == b"<" else b'"'
                if buf.find(closer, tail) < 0:
                    self._check_tail(buf, pos, tail)
                    self._scanned = self._offset + len(buf)
                    if not self._fill() and self._over_limit:
                        self._at_end_of_data()
                    continue
            m = _TOKEN.match(buf, pos)
            if m is not None:
                if not (m.lastgroup in _EXTENDABLE and m.end() == len(buf) and not self._eof):
                    self._pos = m.end()
                    self._pending_at = -1
                    return self._classify(m)
            elif self._eof:
                self._raise_syntax(f"unexpected input {buf[pos:pos + 20]!r}")
            else:
                self._check_partial(buf, pos)
                if buf[pos:pos + 1] in (b"<", b'"'):
                    self._pending_at = self._offset + pos
                    self._scanned = self._offset + len(buf)
            if not self._fill():
                if self._over_limit:
                    self._at_end_of_data()
                continue

    def _check_tail(self, buf: bytes, pos: int, tail: int):
        pending = len(buf) - pos
        if buf[pos:pos + 1] == b"<":
            if _IRI_FORBIDDEN.search(buf, tail):
                self._raise_syntax("malformed IRI")
            if pending - 1 > self.limits.max_iri_bytes:
                self._raise_limit("maxIriBytes", self.limits.max_iri_bytes)
        else:
            if _LINE_BREAK.search(buf, tail):
                self._raise_syntax("malformed literal")
            if pending - 1 > self.limits.max_literal_bytes:
                self._raise_limit("maxLiteralBytes", self.limits.max_literal_bytes)

    def _check_partial(self, buf: bytes, pos: int):
        lead = buf[pos : pos + 1]
        pending = len(buf) - pos
        if lead == b"<":
            if not _PARTIAL_IRI.match(buf, pos):
                self._raise_syntax("malformed IRI")
            if pending - 1 > self.limits.max_iri_bytes:
                self._raise_limit("maxIriBytes", self.limits.max_iri_bytes)
        elif lead == b'"':
            if not _PARTIAL_STRING.match(buf, pos):
                self._raise_syntax("malformed literal")
            if pending - 1 > self.limits.max_literal_bytes:
                self._raise_limit("maxLiteralBytes", self.limits.max_literal_bytes)
        elif pending > 256 or lead not in b"@^_:" and not lead.isalpha() and lead < b"\x80":
            self._raise_syntax(f"unexpected input {buf[pos:pos + 20]!r}")

    def _classify(self, m: re.Match):
        kind = m.lastgroup
        if kind == "iri":
            raw = m.group("iri")
            if len(raw) > self.limits.max_iri_bytes:
                self._raise_limit("maxIriBytes", self.limits.max_iri_bytes)
            return IRIREF, self._decode(raw)
        if kind == "str":
            raw = m.group("str")
            if len(raw) > self.limits.max_literal_bytes:
                self._raise_limit("maxLiteralBytes", self.limits.max_literal_bytes)
            return STRING, self._decode(raw)
        if kind == "at":
            return AT, m.group("at").decode("ascii")
        if kind == "dt":
            return DTYPE, None
        if kind == "pn":
            prefix = self._decode(m.group("pfx") or b"")
            return PNAME, (prefix, self._decode(m.group("loc") or b""))
        if kind == "bn":
            return BLANK, self._decode(m.group("bn"))
        if kind == "semi":
            return SEMI, None
        if kind == "comma":
            return COMMA, None
        if kind == "kw":
            return KW_A, None
        return DOT, None

    def _decode(self, raw: bytes) -> str:
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self._raise_syntax("invalid UTF-8")

    # -- statements ---------------------------------------------------------

    def _iri(self, text: str) -> IRI:
        cache = self._terms
        hit = cache.get(text)
        if hit is not None:
            return hit
        try:
            iri = resolve_relative(self._base, unescape_string(text))
        except (MalformedIri, MalformedTerm) as exc:
            self._raise_syntax(str(exc))
        if len(cache) >= _TERM_CACHE_SIZE:
            cache.clear()
        cache[text] = iri
        return iri

    def _expand(self, pname) -> IRI:
        prefix, local = pname
        if prefix not in self._prefixes:
            self._raise_syntax(f"undeclared prefix {prefix!r}")
        expanded = self._prefixes[prefix] + local
        if len(expanded.encode()) > self.limits.max_iri_bytes:
            self._raise_limit("maxIriBytes", self.limits.max_iri_bytes)
        return IRI(expanded)

    def _need(self):
        tok = self._token()
        if tok is None:
            self._at_end_of_data()
            self._raise_syntax("unexpected end of document")
        return tok

    def _expect_dot(self):
        kind, _ = self._need()
        if kind != DOT:
            self._raise_syntax("expected '.'")

    def _node(self, kind, value, position: str):
        if kind == IRIREF:
            return self._iri(value)
        if kind == PNAME:
            return self._expand(value)
        if kind == BLANK and position != "predicate":
            return BlankNode(value, self.source.value)
        self._raise_syntax(f"unexpected token in {position} position")

    def _statement(self, tok) -> Iterator[Triple]:
        kind, value = tok
        if kind == AT:
            if value == "prefix":
                pkind, pname = self._need()
                if pkind != PNAME or pname[1]:
                    self._raise_syntax("expected prefix declaration 'p:'")
                ikind, iri = self._need()
                if ikind != IRIREF:
                    self._raise_syntax("expected IRI in @prefix")
                self._prefixes[pname[0]] = self._iri(iri).value
                self._expect_dot()
                return
            if value == "base":
                ikind, iri = self._need()
                if ikind != IRIREF:
                    self._raise_syntax("expected IRI in @base")
                self._base = self._iri(iri).value
                self._terms.clear()
                self._expect_dot()
                return
            self._raise_syntax(f"unknown directive @{value}")
        subject = self._node(kind, value, "subject")
        ptok = self._need()
        while True:
            predicate = RDF_TYPE if ptok[0] == KW_A else self._node(*ptok, "predicate")
            while True:
                obj, nxt = self._object()
                yield Triple(subject, predicate, obj)
                if nxt[0] != COMMA:
                    break
            if nxt[0] == DOT:
                return
            if nxt[0] != SEMI:
                self._raise_syntax("expected '.', ';' or ','")
            ptok = self._need()
            while ptok[0] == SEMI:
                ptok = self._need()
            if ptok[0] == DOT:
                return

    def _object(self):
        """One object term plus the token that follows it."""
        okind, ovalue = self._need()
        if okind != STRING:
            return self._node(okind, ovalue, "object"), self._need()
        lexical = self._unescape(ovalue)
        nxt = self._need()
        if nxt[0] == AT:
            return Literal(lexical, None, nxt[1].lower()), self._need()
        if nxt[0] == DTYPE:
            dkind, dvalue = self._need()
            if dkind not in (IRIREF, PNAME):
                self._raise_syntax("expected datatype IRI")
            return Literal(lexical, self._node(dkind, dvalue, "datatype")), self._need()
        return Literal(lexical), nxt

    def _unescape(self, text: str) -> str:
        try:
            return unescape_string(text)
        except MalformedTerm as exc:
            self._raise_syntax(str(exc))

    def _run(self) -> Iterator[SourcedQuad]:
        if not self._fill():
            return
        if self._buf.startswith(b"\xef\xbb\xbf"):
            self._pos = 3
        max_quads = self.limits.max_quads_per_document
        outcome = self.outcome
        while True:
            tok = self._token()
            if tok is None:
                self._at_end_of_data()
                return
            for triple in self._statement(tok):
                if outcome.quad_count >= max_quads:
                    self._raise_limit("maxQuadsPerDocument", max_quads)
                outcome.quad_count += 1
                if outcome.quad_count & 0x3FF == 0:
                    self._check_time()
                yield SourcedQuad(triple, self.source, self.fetched_at, self.depth)

    def __iter__(self) -> Iterator[SourcedQuad]:
        try:
            yield from self._run()
        except LimitExceeded as exc:
            self._record(exc, Vulnerability.SYSTEM_HOGGING)
        except RdfSyntaxError as exc:
            self._record(exc, Vulnerability.DOCUMENT_CORRUPTION)

    def _record(self, exc: Exception, vulnerability: Vulnerability):
        self.outcome.truncated = True
        self._error = exc
        self.outcome.events.append(
            SecurityEvent(
                vulnerability,
                Action.BLOCKED if vulnerability is Vulnerability.SYSTEM_HOGGING else Action.WARNED,
                f"parsing stopped: {exc}",
                self.source.value,
            )
        )
        if self.mode == "strict":
            raise exc


def parse_document_stream(
    stream,
    base: Union[IRI, str],
    limits: ParseLimits = ParseLimits(),
    mode: str = "lenient",
    sink: Optional[Callable[[SourcedQuad], None]] = None,
    depth: int = 0,
) -> ParseOutcome:
    """Parse a whole document.

    Quads go to ``sink`` as soon as they are parsed; without a sink they are
    collected in ``outcome.quads``.
    """
    parser = DocumentParser(stream, base, limits, mode, depth)
    for quad in parser:
        if sink is not None:
            sink(quad)
        else:
            parser.outcome.quads.append(quad)
    return parser.outcome


def as_stream(data: Union[str, bytes]) -> io.BytesIO:
    return io.BytesIO(data.encode() if isinstance(data, str) else data)
