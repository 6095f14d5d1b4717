"""RDF terms, provenance-annotated quads, origins and the security-event vocabulary."""

from __future__ import annotations

import enum
import re
import time
from dataclasses import dataclass, field
from typing import Optional, Union

__all__ = [
    "IRI",
    "Literal",
    "BlankNode",
    "Term",
    "Triple",
    "SourcedQuad",
    "Origin",
    "Vulnerability",
    "Action",
    "SecurityEvent",
    "MalformedIri",
    "MalformedTerm",
    "origin_of",
    "resolve_relative",
    "strip_fragment",
    "parse_term",
    "serialize_term",
    "serialize_quad",
    "escape_string",
    "unescape_string",
]


class MalformedIri(ValueError):
    pass


class MalformedTerm(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


_SCHEME = re.compile(r"[A-Za-z][A-Za-z0-9+.\-]*:")


@dataclass(frozen=True, slots=True)
class IRI:
    value: str

    def __post_init__(self):
        if not _SCHEME.match(self.value):
            raise MalformedIri(f"not an absolute IRI: {self.value[:200]!r}")

    kind = "iri"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class Literal:
    lexical: str
    datatype: Optional[IRI] = None
    language: Optional[str] = None

    kind = "literal"

    def __post_init__(self):
        if self.datatype is not None and self.language is not None:
            raise MalformedTerm("literal cannot carry both datatype and language")


@dataclass(frozen=True, slots=True)
class BlankNode:
    """Blank node; ``scope`` is the IRI of the document that minted the label."""

    label: str
    scope: Optional[str] = None

    kind = "blank"


Term = Union[IRI, Literal, BlankNode]


@dataclass(frozen=True, slots=True)
class Triple:
    subject: Term
    predicate: Term
    object: Term

    def __post_init__(self):
        if isinstance(self.subject, Literal):
            raise MalformedTerm("literal in subject position")
        if not isinstance(self.predicate, IRI):
            raise MalformedTerm("predicate must be an IRI")


@dataclass(frozen=True, slots=True)
class SourcedQuad:
    triple: Triple
    source: IRI
    fetched_at: float = 0.0
    depth: int = 0


@dataclass(frozen=True, slots=True)
class Origin:
    scheme: str
    host: str
    port: int

    def __str__(self) -> str:
        if self.scheme == "file":
            return "file://"
        return f"{self.scheme}://{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Origin":
        return origin_of(text if text.endswith("/") else text + "/")


_DEFAULT_PORTS = {"http": 80, "https": 443, "ws": 80, "wss": 443, "ftp": 21}

# RFC 3986 appendix B
_URI_RE = re.compile(r"^(?:([^:/?#]+):)?(?://([^/?#]*))?([^?#]*)(?:\?([^#]*))?(?:#(.*))?$", re.S)


def _split(ref: str):
    m = _URI_RE.match(ref)
    scheme, authority, path, query, fragment = m.groups()
    return scheme, authority, path, query, fragment


def origin_of(iri: Union[IRI, str]) -> Origin:
    text = iri.value if isinstance(iri, IRI) else iri
    scheme, authority, _path, _q, _f = _split(text)
    if not scheme or not _SCHEME.match(scheme + ":"):
        raise MalformedIri(f"relative or scheme-less IRI: {text[:200]!r}")
    scheme = scheme.lower()
    if scheme == "file":
        return Origin("file", "", 0)
    authority = authority or ""
    hostport = authority.rsplit("@", 1)[-1]
    if hostport.startswith("["):
        end = hostport.find("]")
        if end < 0:
            raise MalformedIri(f"bad IPv6 host in {text[:200]!r}")
        host, rest = hostport[: end + 1], hostport[end + 1 :]
        port_text = rest[1:] if rest.startswith(":") else ""
    else:
        host, _, port_text = hostport.partition(":")
    if port_text:
        if not port_text.isdigit() or int(port_text) > 65535:
            raise MalformedIri(f"bad port in {text[:200]!r}")
        port = int(port_text)
    else:
        port = _DEFAULT_PORTS.get(scheme, 0)
    return Origin(scheme, host.lower(), port)


def _remove_dot_segments(path: str) -> str:
    if "." not in path:
        return path
    out: list[str] = []
    while path:
        if path.startswith("../"):
            path = path[3:]
        elif path.startswith("./"):
            path = path[2:]
        elif path.startswith("/./"):
            path = path[2:]
        elif path == "/.":
            path = "/"
        elif path.startswith("/../"):
            path = path[3:]
            if out:
                out.pop()
        elif path == "/..":
            path = "/"
            if out:
                out.pop()
        elif path in (".", ".."):
            path = ""
        else:
            start = 1 if path.startswith("/") else 0
            idx = path.find("/", start)
            if idx < 0:
                idx = len(path)
            out.append(path[:idx])
            path = path[idx:]
    return "".join(out)


def _recompose(scheme, authority, path, query, fragment) -> str:
    parts = []
    if scheme is not None:
        parts.append(scheme + ":")
    if authority is not None:
        parts.append("//" + authority)
    parts.append(path)
    if query is not None:
        parts.append("?" + query)
    if fragment is not None:
        parts.append("#" + fragment)
    return "".join(parts)


def resolve_relative(base: Union[IRI, str], ref: str) -> IRI:
    """Resolve ``ref`` against ``base`` following RFC 3986 section 5.2."""
    base_text = base.value if isinstance(base, IRI) else base
    bs, ba, bp, bq, _bf = _split(base_text)
    if not bs:
        raise MalformedIri(f"base is not absolute: {base_text[:200]!r}")
    rs, ra, rp, rq, rf = _split(ref)
    if rs is not None:
        ts, ta, tp, tq = rs, ra, _remove_dot_segments(rp), rq
    else:
        if ra is not None:
            ta, tp, tq = ra, _remove_dot_segments(rp), rq
        else:
            if rp == "":
                tp = bp
                tq = rq if rq is not None else bq
            else:
                if rp.startswith("/"):
                    tp = _remove_dot_segments(rp)
                else:
                    if ba is not None and bp == "":
                        merged = "/" + rp
                    else:
                        merged = bp[: bp.rfind("/") + 1] + rp
                    tp = _remove_dot_segments(merged)
                tq = rq
            ta = ba
        ts = bs
    return IRI(_recompose(ts, ta, tp, tq, rf))


def strip_fragment(iri: Union[IRI, str]) -> str:
    text = iri.value if isinstance(iri, IRI) else iri
    return text.split("#", 1)[0]


class Vulnerability(str, enum.Enum):
    UNAUTHORIZED_STATEMENTS = "Unauthorized Statements"
    LEAKAGE = "Intermediate Result and Query Leakage"
    SESSION_HIJACKING = "Session Hijacking"
    DATA_INJECTION = "Cross-site Data Injection"
    CODE_EXECUTION = "Arbitrary Code Execution"
    TRAVERSAL_TRAP = "Link Traversal Trap"
    SYSTEM_HOGGING = "System hogging"
    DOCUMENT_CORRUPTION = "Document Corruption"
    CROSS_QUERY = "Cross-query Execution Interaction"
    PRIORITY_MODIFICATION = "Document Priority Modification"
    NONE = "none"

    @property
    def axes(self) -> tuple[str, ...]:
        return _AXES[self]


_AXES = {
    Vulnerability.UNAUTHORIZED_STATEMENTS: ("Query Results",),
    Vulnerability.LEAKAGE: ("Query Results",),
    Vulnerability.SESSION_HIJACKING: ("Data Integrity",),
    Vulnerability.DATA_INJECTION: ("Query Results", "Data Integrity"),
    Vulnerability.CODE_EXECUTION: ("Data Integrity", "Query Process"),
    Vulnerability.TRAVERSAL_TRAP: ("Query Process",),
    Vulnerability.SYSTEM_HOGGING: ("Query Process",),
    Vulnerability.DOCUMENT_CORRUPTION: ("Query Process",),
    Vulnerability.CROSS_QUERY: ("Data Integrity",),
    Vulnerability.PRIORITY_MODIFICATION: ("Query Results",),
    Vulnerability.NONE: (),
}


class Action(str, enum.Enum):
    BLOCKED = "blocked"
    WARNED = "warned"
    OBSERVED = "observed"


@dataclass(frozen=True)
class SecurityEvent:
    vulnerability: Vulnerability
    action: Action
    detail: str
    subject_url: Optional[str] = None
    attacker: Optional[str] = None
    victim: Optional[str] = None
    impact: Optional[str] = None
    difficulty: Optional[str] = None
    at: float = field(default_factory=time.monotonic, compare=False)

    def to_dict(self) -> dict:
        out = {
            "vulnerability": self.vulnerability.value,
            "action": self.action.value,
            "detail": self.detail,
            "subjectUrl": self.subject_url,
        }
        for key in ("attacker", "victim", "impact", "difficulty"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


# --- N-Triples style term syntax -------------------------------------------

_ESCAPES = {"t": "\t", "b": "\b", "n": "\n", "r": "\r", "f": "\f", '"': '"', "'": "'", "\\": "\\"}
_ESCAPE_RE = re.compile(r"\\(?:u([0-9A-Fa-f]{4})|U([0-9A-Fa-f]{8})|(.))", re.S)


def unescape_string(text: str, offset: int = 0) -> str:
    if "\\" not in text:
        return text

    def sub(m: re.Match) -> str:
        if m.group(1) or m.group(2):
            return chr(int(m.group(1) or m.group(2), 16))
        ch = m.group(3)
        if ch not in _ESCAPES:
            raise MalformedTerm(f"bad escape \\{ch}", offset + m.start())
        return _ESCAPES[ch]

    return _ESCAPE_RE.sub(sub, text)


_LINE_BREAKERS = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\x7f\x85\u2028\u2029]")


def escape_string(text: str) -> str:
    text = (
        text.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\r", "\\r")
        .replace("\t", "\\t")
    )
    # other control and line-separator characters would break line-based output
    return _LINE_BREAKERS.sub(lambda m: f"\\u{ord(m.group()):04X}", text)


def _escape_iri(text: str) -> str:
    # UCHAR-escape everything N-Triples forbids inside IRIREF
    return re.sub(r'[\x00-\x20<>"{}|^`\\]', lambda m: f"\\u{ord(m.group()):04X}", text)


def serialize_term(term: Term) -> str:
    if isinstance(term, IRI):
        return f"<{_escape_iri(term.value)}>"
    if isinstance(term, BlankNode):
        return f"_:{term.label}"
    out = f'"{escape_string(term.lexical)}"'
    if term.language:
        out += "@" + term.language
    elif term.datatype is not None:
        out += "^^" + serialize_term(term.datatype)
    return out


def serialize_quad(quad: SourcedQuad) -> str:
    t = quad.triple
    return (
        f"{serialize_term(t.subject)} {serialize_term(t.predicate)} "
        f"{serialize_term(t.object)} {serialize_term(quad.source)} ."
    )


IRIREF = r'<((?:[^\x00-\x20<>"{}|^`\\]|\\u[0-9A-Fa-f]{4}|\\U[0-9A-Fa-f]{8})*)>'
STRING = r'"((?:[^"\\\n\r]|\\.)*)"'
LANGTAG = r"@([A-Za-z]+(?:-[A-Za-z0-9]+)*)"
BLANK = r"_:([A-Za-z0-9_](?:[A-Za-z0-9_.\-]*[A-Za-z0-9_\-])?)"

_TERM_RE = re.compile(rf"(?:{IRIREF}|{STRING}(?:{LANGTAG}|\^\^{IRIREF})?|{BLANK})")


def parse_term(text: str, scope: Optional[str] = None) -> Term:
    """Parse a single N-Triples token (``<iri>``, ``"lit"@en``, ``"1"^^<dt>``, ``_:b``)."""
    stripped = text.strip()
    lead = len(text) - len(text.lstrip())
    m = _TERM_RE.fullmatch(stripped)
    if not m:
        bad = 0
        m2 = _TERM_RE.match(stripped)
        if m2:
            bad = m2.end()
        raise MalformedTerm(f"not a term: {stripped[:80]!r}", lead + len(stripped[:bad].encode()))
    iri, lit, lang, dtype, blank = m.groups()
    try:
        if iri is not None:
            return IRI(unescape_string(iri, lead + 1))
        if lit is not None:
            datatype = IRI(unescape_string(dtype)) if dtype is not None else None
            return Literal(unescape_string(lit, lead + 1), datatype, lang.lower() if lang else None)
    except MalformedIri as exc:
        raise MalformedTerm(str(exc), lead) from exc
    return BlankNode(blank, scope)
