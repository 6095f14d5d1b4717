"""GET-only document dereferencing with origin-scoped sessions and keyed caching."""

from __future__ import annotations

import hashlib
import http.client
import io
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union
from urllib.parse import quote, unquote, urlsplit

from .model import IRI, Action, Origin, SecurityEvent, Vulnerability, origin_of, resolve_relative, strip_fragment

__all__ = [
    "SEED",
    "ANONYMOUS",
    "SHARED_SANDBOX",
    "Session",
    "SessionStore",
    "FetchPolicy",
    "CacheKey",
    "FetchedDocument",
    "DocumentCache",
    "Dereferencer",
    "FetchError",
    "SchemeBlocked",
    "RedirectLimitExceeded",
    "RedirectLoop",
    "TransportError",
    "HttpError",
    "token_digest",
]

SEED = "seed"
ANONYMOUS = "anonymous"
SHARED_SANDBOX = "shared"
REDIRECT_CODES = frozenset({301, 302, 303, 307, 308})
CACHE_MODES = ("perQuery", "shared", "off")


def token_digest(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Session:
    origin: Origin
    token: str

    def __repr__(self) -> str:
        return f"Session(origin={self.origin}, token=sha256:{token_digest(self.token)})"


class SessionStore:
    """Bearer sessions keyed by the origin they were created for."""

    def __init__(self, sessions: Iterable[Session] = ()):
        self._lock = threading.Lock()
        self._by_origin: dict[Origin, Session] = {}
        for session in sessions:
            self.add(session)

    def add(self, session: Session) -> None:
        with self._lock:
            self._by_origin[session.origin] = session

    def for_target(self, url: Union[IRI, str]) -> Optional[Session]:
        with self._lock:
            return self._by_origin.get(origin_of(url))

    def __len__(self) -> int:
        return len(self._by_origin)

    def __iter__(self):
        with self._lock:
            return iter(list(self._by_origin.values()))


@dataclass(frozen=True)
class FetchPolicy:
    max_redirects: int = 21
    allowed_schemes: frozenset = frozenset({"http", "https"})
    allow_file_scheme: bool = False
    timeout_seconds: float = 30.0
    max_header_bytes: int = 65536
    get_only: bool = True

    def __post_init__(self):
        if self.get_only is not True:
            raise ValueError("get_only cannot be disabled: traversal only issues GET requests")
        if self.max_redirects < 0:
            raise ValueError("max_redirects must be non-negative")
        object.__setattr__(self, "allowed_schemes", frozenset(s.lower() for s in self.allowed_schemes))

    def scheme_allowed(self, url: Union[IRI, str]) -> bool:
        scheme = origin_of(url).scheme
        if scheme == "file":
            return self.allow_file_scheme
        return scheme in self.allowed_schemes


@dataclass(frozen=True)
class CacheKey:
    url: str
    auth_scope: str
    sandbox_id: str


@dataclass
class FetchedDocument:
    final_url: IRI
    status: int
    body: io.RawIOBase
    media_type: str
    redirect_chain: tuple = ()
    from_cache: bool = False
    request_url: Optional[IRI] = None
    session_origin: Optional[Origin] = None
    fetched_at: float = field(default_factory=time.monotonic)

    def read_all(self) -> bytes:
        return self.body.read()

    def close(self) -> None:
        self.body.close()


class FetchError(Exception):
    event: Optional[SecurityEvent] = None

    def __init__(self, message: str, url: str = ""):
        super().__init__(message)
        self.url = url


class SchemeBlocked(FetchError):
    pass


class RedirectLimitExceeded(FetchError):
    def __init__(self, message: str, url: str = "", chain: tuple = ()):
        super().__init__(message, url)
        self.chain = chain


class RedirectLoop(RedirectLimitExceeded):
    pass


class TransportError(FetchError):
    pass


class HttpError(FetchError):
    def __init__(self, status: int, url: str = ""):
        super().__init__(f"HTTP {status} for {url}", url)
        self.status = status


@dataclass(frozen=True)
class _CacheEntry:
    final_url: IRI
    status: int
    body: bytes
    media_type: str
    redirect_chain: tuple
    session_origin: Optional[Origin]


class DocumentCache:
    """Exact-key document cache; ignores HTTP caching headers."""

    def __init__(self, max_entry_bytes: int = 16 * 1024 * 1024):
        self.max_entry_bytes = max_entry_bytes
        self._lock = threading.Lock()
        self._entries: dict[CacheKey, _CacheEntry] = {}
        self.hits = 0
        self.misses = 0

    def lookup(self, key: CacheKey) -> Optional[FetchedDocument]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
                return None
            self.hits += 1
        return FetchedDocument(
            final_url=entry.final_url,
            status=entry.status,
            body=io.BytesIO(entry.body),
            media_type=entry.media_type,
            redirect_chain=entry.redirect_chain,
            from_cache=True,
            request_url=IRI(key.url),
            session_origin=entry.session_origin,
        )

    def store(self, key: CacheKey, entry: _CacheEntry) -> None:
        with self._lock:
            self._entries[key] = entry

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries


class _RecordingBody(io.RawIOBase):
    """Pass-through body that stores a complete response in the cache at EOF."""

    def __init__(self, raw, on_complete: Callable[[bytes], None], cap: int):
        self._raw = raw
        self._parts: Optional[list] = []
        self._size = 0
        self._cap = cap
        self._on_complete = on_complete

    def readable(self) -> bool:
        return True

    def _track(self, data: bytes) -> bytes:
        if self._parts is not None:
            if data:
                self._size += len(data)
                if self._size > self._cap:
                    self._parts = None
                else:
                    self._parts.append(data)
            else:
                self._on_complete(b"".join(self._parts))
                self._parts = None
        return data

    def read(self, n: int = -1) -> bytes:
        if n is not None and n >= 0:
            return self._track(self._raw.read(n))
        data = self._track(self._raw.read())
        self._track(b"")
        return data

    def read1(self, n: int = -1) -> bytes:
        reader = getattr(self._raw, "read1", self._raw.read)
        return self._track(reader(n))

    def close(self) -> None:
        try:
            self._raw.close()
        finally:
            super().close()


class _ClosingResponse(io.RawIOBase):
    def __init__(self, response: http.client.HTTPResponse, conn: http.client.HTTPConnection):
        self._response = response
        self._conn = conn

    def readable(self) -> bool:
        return True

    def read(self, n: int = -1) -> bytes:
        try:
            return self._response.read() if n is None or n < 0 else self._response.read(n)
        except (OSError, http.client.HTTPException) as exc:
            raise TransportError(f"body read failed: {exc}") from exc

    def read1(self, n: int = -1) -> bytes:
        try:
            return self._response.read1(n)
        except (OSError, http.client.HTTPException) as exc:
            raise TransportError(f"body read failed: {exc}") from exc

    def close(self) -> None:
        try:
            self._response.close()
            self._conn.close()
        finally:
            super().close()


_SAFE_URL_CHARS = "/:@!$&'()*+,;=-._~%?"
_MEDIA_BY_SUFFIX = {".ttl": "text/turtle", ".nt": "application/n-triples", ".html": "text/html"}


def _request_target(url: str) -> str:
    parts = urlsplit(url)
    target = quote(parts.path or "/", safe=_SAFE_URL_CHARS)
    if parts.query:
        target += "?" + quote(parts.query, safe=_SAFE_URL_CHARS)
    return target


class Dereferencer:
    """Issues GET requests under a :class:`FetchPolicy`.

    ``request_log`` records every request that reached the transport, with
    the referrer origin and the origin of any session attached to it.
    """

    def __init__(
        self,
        policy: FetchPolicy = FetchPolicy(),
        sessions: Optional[SessionStore] = None,
        cache: Optional[DocumentCache] = None,
    ):
        self.policy = policy
        self.sessions = sessions if sessions is not None else SessionStore()
        self.cache = cache if cache is not None else DocumentCache()
        self.request_log: list[dict] = []
        self._log_lock = threading.Lock()

    def dereference(
        self,
        url: Union[IRI, str],
        referrer_origin: Union[Origin, str] = SEED,
        cache_mode: str = "perQuery",
        sandbox_id: str = SHARED_SANDBOX,
        events: Optional[list] = None,
        allow_session: Optional[Callable] = None,
        accept: str = "text/turtle",
    ) -> FetchedDocument:
        """Fetch ``url`` and return the response with its body still streaming.

        ``allow_session(target, referrer_origin, session)`` decides whether a
        stored session may be attached; without it no session is ever sent.
        """
        if cache_mode not in CACHE_MODES:
            raise ValueError(f"unknown cache mode {cache_mode!r}")
        events = events if events is not None else []
        request_url = IRI(strip_fragment(url))
        self._check_scheme(request_url, events)

        session = self._pick_session(request_url, referrer_origin, allow_session, events)
        key = None
        if cache_mode != "off":
            scope = str(session.origin) if session is not None else ANONYMOUS
            sandbox = SHARED_SANDBOX if cache_mode == "shared" else sandbox_id
            key = CacheKey(request_url.value, scope, sandbox)
            hit = self.cache.lookup(key)
            if hit is not None:
                return hit

        doc = self._follow(request_url, referrer_origin, session, allow_session, events, accept)
        doc.request_url = request_url
        if key is not None and 200 <= doc.status < 300:
            snapshot = (doc.final_url, doc.status, doc.media_type, doc.redirect_chain, doc.session_origin)

            def complete(body: bytes, key=key, snapshot=snapshot):
                final_url, status, media_type, chain, session_origin = snapshot
                self.cache.store(key, _CacheEntry(final_url, status, body, media_type, chain, session_origin))

            doc.body = _RecordingBody(doc.body, complete, self.cache.max_entry_bytes)
        return doc

    # -- internals -----------------------------------------------------------

    def _check_scheme(self, url: IRI, events: list) -> None:
        if self.policy.scheme_allowed(url):
            return
        event = SecurityEvent(
            Vulnerability.LEAKAGE,
            Action.BLOCKED,
            f"scheme {origin_of(url).scheme!r} is not allowed for traversal",
            url.value,
        )
        events.append(event)
        err = SchemeBlocked(f"blocked scheme for {url.value}", url.value)
        err.event = event
        raise err

    def _pick_session(self, url: IRI, referrer_origin, allow_session, events: list) -> Optional[Session]:
        session = self.sessions.for_target(url)
        if session is None:
            return None
        if allow_session is not None and allow_session(url, referrer_origin, session):
            return session
        events.append(
            SecurityEvent(
                Vulnerability.SESSION_HIJACKING,
                Action.OBSERVED,
                f"session for {session.origin} not attached (link referred from {referrer_origin})",
                url.value,
            )
        )
        return None

    def _log(self, url: str, referrer_origin, session: Optional[Session]) -> None:
        with self._log_lock:
            self.request_log.append(
                {
                    "method": "GET",
                    "url": url,
                    "referrerOrigin": str(referrer_origin),
                    "sessionOrigin": str(session.origin) if session else None,
                    "at": time.monotonic(),
                }
            )

    def _follow(self, url, referrer_origin, session, allow_session, events, accept) -> FetchedDocument:
        chain: list[IRI] = []
        visited = {url.value}
        current = url
        hop_referrer = referrer_origin
        while True:
            status, headers, body = self._get_once(current, hop_referrer, session, accept)
            if status in REDIRECT_CODES and headers.get("location"):
                body.close()
                try:
                    target = resolve_relative(current, headers["location"])
                except ValueError as exc:
                    raise TransportError(f"bad redirect location from {current.value}: {exc}", current.value)
                target = IRI(strip_fragment(target))
                if len(chain) >= self.policy.max_redirects:
                    self._redirect_fault(
                        RedirectLimitExceeded,
                        f"more than {self.policy.max_redirects} redirects starting at {url.value}",
                        url,
                        chain,
                        events,
                    )
                if target.value in visited:
                    self._redirect_fault(RedirectLoop, f"redirect cycle back to {target.value}", url, chain, events)
                self._check_scheme(target, events)
                chain.append(target)
                visited.add(target.value)
                hop_referrer = origin_of(current)
                current = target
                # re-decide the session for every hop; the previous hop becomes the referrer
                session = self._pick_session(current, hop_referrer, allow_session, events)
                continue
            if status >= 400:
                body.close()
                raise HttpError(status, current.value)
            media = headers.get("content-type", "").split(";")[0].strip().lower()
            return FetchedDocument(
                final_url=current,
                status=status,
                body=body,
                media_type=media,
                redirect_chain=tuple(chain),
                session_origin=session.origin if session else None,
            )

    def _redirect_fault(self, cls, message, url, chain, events):
        event = SecurityEvent(Vulnerability.TRAVERSAL_TRAP, Action.BLOCKED, message, url.value)
        events.append(event)
        err = cls(message, url.value, tuple(chain))
        err.event = event
        raise err

    def _get_once(self, url: IRI, referrer_origin, session: Optional[Session], accept: str):
        origin = origin_of(url)
        self._log(url.value, referrer_origin, session)
        if origin.scheme == "file":
            return self._get_file(url)
        headers = {"Accept": accept, "User-Agent": "ltqp-guard"}
        if session is not None:
            headers["Authorization"] = f"Bearer {session.token}"
        host = origin.host[1:-1] if origin.host.startswith("[") else origin.host
        conn_cls = http.client.HTTPSConnection if origin.scheme == "https" else http.client.HTTPConnection
        conn = conn_cls(host, origin.port, timeout=self.policy.timeout_seconds)
        try:
            conn.request("GET", _request_target(url.value), headers=headers)
            response = conn.getresponse()
        except (OSError, http.client.HTTPException, ValueError) as exc:
            conn.close()
            raise TransportError(f"GET {url.value} failed: {exc}", url.value) from exc
        header_bytes = sum(len(k) + len(v) + 4 for k, v in response.getheaders())
        if header_bytes > self.policy.max_header_bytes:
            response.close()
            conn.close()
            raise TransportError(f"response headers exceed {self.policy.max_header_bytes} bytes", url.value)
        lowered = {k.lower(): v for k, v in response.getheaders()}
        return response.status, lowered, _ClosingResponse(response, conn)

    def _get_file(self, url: IRI):
        path = unquote(urlsplit(url.value).path)
        try:
            handle = open(path, "rb")
        except OSError as exc:
            raise HttpError(404, url.value) from exc
        media = _MEDIA_BY_SUFFIX.get(os.path.splitext(path)[1], "text/turtle")
        return 200, {"content-type": media}, handle
