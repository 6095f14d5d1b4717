"""Loopback HTTP server that materializes adversarial scenario manifests.

A manifest describes one or more origins (each served on its own port, so
origins differ by port), the behavior of every path, bearer-token protected
paths, and metadata classifying the attack. Bodies and locations may use
``{{origin:NAME}}`` to refer to another origin's base URL and
``{{repeat:C:N}}`` to expand ``C`` repeated ``N`` times.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from typing import Optional, Union
from urllib.parse import parse_qs, unquote, urlsplit

from .model import Vulnerability, escape_string

__all__ = [
    "Static",
    "Redirect",
    "Delay",
    "InfiniteStream",
    "InjectionTemplate",
    "MutatingGet",
    "EndpointStub",
    "Corrupt",
    "NotFound",
    "Sequence",
    "OriginSpec",
    "ScenarioManifest",
    "ScenarioServer",
    "ManifestInvalid",
    "PortUnavailable",
    "UnknownScenario",
    "SCENARIO_IDS",
    "load_manifest",
    "scenario_fixture",
    "serve",
]

SCENARIO_IDS = tuple(f"S{i}" for i in range(1, 11))
GARBAGE = b"\x00\xff\xfe <<< }{ garbage"


class ManifestInvalid(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class PortUnavailable(OSError):
    pass


class UnknownScenario(KeyError):
    pass


@dataclass(frozen=True)
class Static:
    file: Optional[str] = None
    media_type: str = "text/turtle"
    body: Optional[str] = None


@dataclass(frozen=True)
class Redirect:
    status: int = 302
    location: str = ""
    loop_with: Optional[str] = None


@dataclass(frozen=True)
class Delay:
    millis: int
    then: object


@dataclass(frozen=True)
class InfiniteStream:
    template: str
    quads_per_chunk: int = 200
    media_type: str = "text/turtle"


@dataclass(frozen=True)
class InjectionTemplate:
    template_file: str
    escaping: bool = False
    param: str = "name"
    media_type: str = "text/turtle"


@dataclass(frozen=True)
class MutatingGet:
    state_key: str


@dataclass(frozen=True)
class EndpointStub:
    bindings: tuple = ()


@dataclass(frozen=True)
class Corrupt:
    file: str
    truncate: Optional[int] = None
    garbage_at: Optional[int] = None
    media_type: str = "text/turtle"


@dataclass(frozen=True)
class NotFound:
    pass


@dataclass(frozen=True)
class Sequence:
    """Serves ``<path><n>`` for every n >= 0; ``{n}`` and ``{next}`` fill the template."""

    template: str
    media_type: str = "text/turtle"


Behavior = Union[
    Static, Redirect, Delay, InfiniteStream, InjectionTemplate, MutatingGet, EndpointStub, Corrupt, NotFound, Sequence
]


@dataclass
class OriginSpec:
    resources: dict = field(default_factory=dict)
    auth: dict = field(default_factory=dict)


@dataclass
class ScenarioManifest:
    id: str
    name: str
    vulnerability: Vulnerability
    origins: dict
    metadata: dict = field(default_factory=dict)
    sessions: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    setup: dict = field(default_factory=dict)
    exploit: dict = field(default_factory=dict)
    hardened: dict = field(default_factory=dict)
    evidence: str = ""
    requires_policy: bool = False
    directory: Optional[Path] = None

    def read_file(self, name: str) -> str:
        if self.directory is None:
            raise ManifestInvalid(f"no directory to resolve {name!r}")
        return (self.directory / name).read_text(encoding="utf-8")


# -- manifest loading --------------------------------------------------------


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ManifestInvalid("duplicate key", key)
        out[key] = value
    return out


def _behavior(spec: dict, where: str, directory: Optional[Path]) -> Behavior:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ManifestInvalid("behavior must be an object with a 'type'", where)
    kind = spec["type"]

    def need_file(name):
        if directory is not None and not (directory / name).is_file():
            raise ManifestInvalid(f"missing file {name!r}", where)
        return name

    try:
        if kind == "static":
            if "file" not in spec and "body" not in spec:
                raise ManifestInvalid("static needs 'file' or 'body'", where)
            file = need_file(spec["file"]) if "file" in spec else None
            return Static(file, spec.get("mediaType", "text/turtle"), spec.get("body"))
        if kind == "redirect":
            status = int(spec.get("status", 302))
            if not 301 <= status <= 308:
                raise ManifestInvalid(f"redirect status {status} outside 301-308", where)
            if not spec.get("location") and not spec.get("loopWith"):
                raise ManifestInvalid("redirect needs 'location' or 'loopWith'", where)
            return Redirect(status, spec.get("location", ""), spec.get("loopWith"))
        if kind == "delay":
            return Delay(int(spec["millis"]), _behavior(spec["then"], where, directory))
        if kind == "infiniteStream":
            if "{n}" not in spec["template"]:
                raise ManifestInvalid("infiniteStream template needs a {n} counter slot", where)
            return InfiniteStream(spec["template"], int(spec.get("quadsPerChunk", 200)), spec.get("mediaType", "text/turtle"))
        if kind == "injectionTemplate":
            return InjectionTemplate(
                need_file(spec["templateFile"]),
                spec.get("escaping", "off") in ("on", True),
                spec.get("param", "name"),
                spec.get("mediaType", "text/turtle"),
            )
        if kind == "mutatingGet":
            return MutatingGet(spec["stateKey"])
        if kind == "endpointStub":
            return EndpointStub(tuple(spec.get("bindings", ())))
        if kind == "corrupt":
            corruption = spec.get("corruption", {})
            if ("truncate" in corruption) == ("garbageAt" in corruption):
                raise ManifestInvalid("corrupt needs exactly one of truncate/garbageAt", where)
            return Corrupt(need_file(spec["file"]), corruption.get("truncate"), corruption.get("garbageAt"), spec.get("mediaType", "text/turtle"))
        if kind == "notFound":
            return NotFound()
        if kind == "sequence":
            if "{next}" not in spec["template"]:
                raise ManifestInvalid("sequence template needs a {next} slot", where)
            return Sequence(spec["template"], spec.get("mediaType", "text/turtle"))
    except KeyError as exc:
        raise ManifestInvalid(f"missing field {exc.args[0]!r} for {kind}", where) from None
    raise ManifestInvalid(f"unknown behavior type {kind!r}", where)


def manifest_from_dict(data: dict, directory: Optional[Path] = None) -> ScenarioManifest:
    origins_data = data.get("origins")
    if origins_data is None:
        origins_data = {"main": {"resources": data.get("resources", {}), "auth": data.get("auth", {})}}
    if not origins_data:
        raise ManifestInvalid("manifest defines no origins")
    origins = {}
    for name, odata in origins_data.items():
        spec = OriginSpec()
        for path, bspec in odata.get("resources", {}).items():
            if not path.startswith("/"):
                raise ManifestInvalid("paths must start with '/'", path)
            if path.startswith("/__"):
                raise ManifestInvalid("paths under '/__' are reserved", path)
            spec.resources[path] = _behavior(bspec, f"{name}{path}", directory)
        for path, token in odata.get("auth", {}).items():
            if path not in spec.resources:
                raise ManifestInvalid("auth for undefined path", path)
            spec.auth[path] = token
        origins[name] = spec
    try:
        vulnerability = Vulnerability(data.get("vulnerability", "none"))
    except ValueError:
        raise ManifestInvalid(f"unknown vulnerability {data.get('vulnerability')!r}") from None
    for session in data.get("sessions", []):
        if session.get("origin") not in origins:
            raise ManifestInvalid(f"session for unknown origin {session.get('origin')!r}")
    return ScenarioManifest(
        id=data.get("id", data.get("name", "manifest")),
        name=data.get("name", ""),
        vulnerability=vulnerability,
        origins=origins,
        metadata=data.get("metadata", {}),
        sessions=list(data.get("sessions", [])),
        queries=list(data.get("queries", [])),
        setup=data.get("setup", {}),
        exploit=data.get("exploit", {}),
        hardened=data.get("hardened", {}),
        evidence=data.get("evidence", ""),
        requires_policy=bool(data.get("requiresPolicy", False)),
        directory=directory,
    )


def load_manifest(path: Union[str, Path]) -> ScenarioManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestInvalid(f"cannot read manifest: {exc}", str(path)) from exc
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"invalid JSON: {exc}", str(path)) from exc
    return manifest_from_dict(data, path.parent)


def _scenario_dirs() -> dict:
    root = Path(str(resources.files("ltqp_guard") / "scenarios"))
    found = {}
    for manifest in sorted(root.glob("*/manifest.json")):
        scenario_id = manifest.parent.name.split("_", 1)[0].upper()
        found[scenario_id] = manifest
    return found


def scenario_fixture(scenario_id: str) -> ScenarioManifest:
    dirs = _scenario_dirs()
    key = scenario_id.upper()
    if key not in dirs:
        raise UnknownScenario(scenario_id)
    return load_manifest(dirs[key])


# -- serving -----------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{\{(origin|repeat):([^}]*)\}\}")


class ScenarioServer:
    """Running scenario: one loopback server per origin, shared log and state."""

    def __init__(self, manifest: ScenarioManifest, port: int = 0, host: str = "127.0.0.1"):
        self.manifest = manifest
        self.host = host
        self.base_urls: dict[str, str] = {}
        self._servers: list[ThreadingHTTPServer] = []
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._log: list[dict] = []
        self._endpoint_log: list[dict] = []
        self._state: dict[str, str] = {}
        for spec in manifest.origins.values():
            for behavior in spec.resources.values():
                while isinstance(behavior, Delay):
                    behavior = behavior.then
                if isinstance(behavior, MutatingGet):
                    self._state[behavior.state_key] = "intact"
        self._start(port)

    # lifecycle

    def _start(self, port: int) -> None:
        for index, name in enumerate(self.manifest.origins):
            want = port + index if port else 0
            handler = type("Handler", (_Handler,), {"scenario": self, "origin_name": name})
            try:
                server = ThreadingHTTPServer((self.host, want), handler)
            except OSError as exc:
                self.stop()
                raise PortUnavailable(f"cannot bind {self.host}:{want}: {exc}") from exc
            server.daemon_threads = True
            self._servers.append(server)
            self.base_urls[name] = f"http://{self.host}:{server.server_address[1]}"
        for server in self._servers:
            thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()

    def __enter__(self) -> "ScenarioServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def base_url(self) -> str:
        return next(iter(self.base_urls.values())) + "/"

    def url(self, origin: str, path: str = "/") -> str:
        return self.base_urls[origin] + path

    def origin_of_url(self, url: str) -> Optional[str]:
        for name, base in self.base_urls.items():
            if url == base or url.startswith(base + "/"):
                return name
        return None

    def expand(self, text: str) -> str:
        def sub(m: re.Match) -> str:
            kind, arg = m.groups()
            if kind == "origin":
                if arg not in self.base_urls:
                    raise ManifestInvalid(f"unknown origin placeholder {arg!r}")
                return self.base_urls[arg]
            char, _, count = arg.rpartition(":")
            return char * int(count)

        return _PLACEHOLDER.sub(sub, text)

    def expand_obj(self, obj):
        if isinstance(obj, str):
            return self.expand(obj)
        if isinstance(obj, list):
            return [self.expand_obj(v) for v in obj]
        if isinstance(obj, dict):
            return {k: self.expand_obj(v) for k, v in obj.items()}
        return obj

    # assertion surface

    def log(self) -> list[dict]:
        with self._lock:
            return [dict(entry) for entry in self._log]

    def state(self) -> dict:
        with self._lock:
            return dict(self._state)

    def endpoint_log(self) -> list[dict]:
        with self._lock:
            return [dict(entry) for entry in self._endpoint_log]

    def requests_to(self, origin: str, path: Optional[str] = None) -> list[dict]:
        return [
            e for e in self.log()
            if e["origin"] == origin and (path is None or e["path"].split("?", 1)[0] == path)
        ]

    def _append_log(self, entry: dict) -> dict:
        with self._lock:
            entry["timestamp"] = time.monotonic()
            self._log.append(entry)
        return entry


def serve(manifest: ScenarioManifest, port: int = 0) -> ScenarioServer:
    return ScenarioServer(manifest, port)


def _sequence_member(spec: OriginSpec, path: str):
    for prefix, behavior in spec.resources.items():
        if isinstance(behavior, Sequence) and path.startswith(prefix):
            rest = path[len(prefix):]
            if rest.isdigit() and (rest == "0" or not rest.startswith("0")):
                return behavior, int(rest)
    return None, None


class _Handler(BaseHTTPRequestHandler):
    scenario: ScenarioServer
    origin_name: str
    server_version = "ltqp-harness"

    def log_message(self, format, *args):
        pass

    def do_GET(self):
        self._dispatch("GET")

    def do_HEAD(self):
        self._dispatch("HEAD")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def do_PATCH(self):
        self._dispatch("PATCH")

    # helpers

    def _send(self, status: int, body: bytes = b"", media_type: str = "text/plain", headers: Optional[dict] = None):
        # the entry is complete before the client can see the response
        with self.scenario._lock:
            self._entry["status"] = status
            self._entry["bodyBytesSent"] += len(body) if self.command != "HEAD" else 0
        self.send_response(status)
        self.send_header("Content-Type", media_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        if self.command != "HEAD" and body:
            self.wfile.write(body)

    def _dispatch(self, method: str):
        scenario = self.scenario
        parts = urlsplit(self.path)
        path = unquote(parts.path)
        if method == "GET" and path in ("/__log", "/__state"):
            payload = scenario.log() if path == "/__log" else scenario.state()
            body = json.dumps(payload, indent=1).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        auth = self.headers.get("Authorization")
        spec = scenario.manifest.origins[self.origin_name]
        behavior = spec.resources.get(path)
        counter = None
        if behavior is None:
            behavior, counter = _sequence_member(spec, path)
        self._entry = scenario._append_log(
            {
                "origin": self.origin_name,
                "method": method,
                "path": self.path,
                "authorization": auth is not None,
                "authorizationHash": hashlib.sha256(auth.encode()).hexdigest()[:16] if auth else None,
                "behavior": type(behavior).__name__ if behavior is not None else None,
                "status": None,
                "bodyBytesSent": 0,
            }
        )
        if behavior is None:
            return self._send(404, b"not found")
        if method not in ("GET", "HEAD"):
            return self._send(405, b"method not allowed", headers={"Allow": "GET"})
        required = spec.auth.get(path)
        if required is not None and auth != f"Bearer {required}":
            return self._send(401, b"unauthorized", headers={"WWW-Authenticate": "Bearer"})
        try:
            if counter is not None:
                self._sequence(behavior, counter)
            else:
                self._behave(behavior, parts.query)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def _file(self, name: str) -> str:
        return self.scenario.expand(self.scenario.manifest.read_file(name))

    def _behave(self, behavior, query: str):
        if isinstance(behavior, Delay):
            time.sleep(behavior.millis / 1000.0)
            return self._behave(behavior.then, query)
        if isinstance(behavior, Static):
            text = behavior.body if behavior.file is None else self.scenario.manifest.read_file(behavior.file)
            return self._send(200, self.scenario.expand(text).encode(), behavior.media_type)
        if isinstance(behavior, Redirect):
            if behavior.loop_with:
                hop = int(parse_qs(query).get("hop", ["0"])[0] or 0)
                location = f"{behavior.loop_with}?hop={hop + 1}"
            else:
                location = self.scenario.expand(behavior.location)
            return self._send(behavior.status, b"", headers={"Location": location})
        if isinstance(behavior, (NotFound, Sequence)):
            # a sequence prefix on its own is not a member
            return self._send(404, b"not found")
        if isinstance(behavior, MutatingGet):
            with self.scenario._lock:
                self.scenario._state[behavior.state_key] = "mutated"
            return self._send(200, b"", "text/turtle")
        if isinstance(behavior, InjectionTemplate):
            value = parse_qs(query).get(behavior.param, [""])[0]
            if behavior.escaping:
                value = escape_string(value)
            body = self._file(behavior.template_file).replace("{" + behavior.param + "}", value)
            return self._send(200, body.encode(), behavior.media_type)
        if isinstance(behavior, Corrupt):
            data = self._file(behavior.file).encode()
            if behavior.truncate is not None:
                data = data[: behavior.truncate]
            else:
                data = data[: behavior.garbage_at] + GARBAGE + data[behavior.garbage_at :]
            return self._send(200, data, behavior.media_type)
        if isinstance(behavior, EndpointStub):
            return self._endpoint(behavior, query)
        if isinstance(behavior, InfiniteStream):
            return self._stream(behavior)
        raise AssertionError(f"unhandled behavior {behavior!r}")

    def _sequence(self, behavior: Sequence, n: int):
        body = self.scenario.expand(behavior.template).replace("{next}", str(n + 1)).replace("{n}", str(n))
        return self._send(200, body.encode(), behavior.media_type)

    def _endpoint(self, behavior: EndpointStub, query: str):
        params = parse_qs(query, keep_blank_values=True)
        record = {
            "pattern": params.get("pattern", [""])[0],
            "bindings": params.get("bindings", [""])[0],
            "raw": query,
        }
        with self.scenario._lock:
            self.scenario._endpoint_log.append(record)
        body = "".join(self.scenario.expand(line) + "\n" for line in behavior.bindings)
        return self._send(200, body.encode(), "text/plain")

    def _stream(self, behavior: InfiniteStream):
        self._entry["status"] = 200
        self.send_response(200)
        self.send_header("Content-Type", behavior.media_type)
        self.send_header("Connection", "close")
        self.end_headers()
        template = self.scenario.expand(behavior.template)
        n = 0
        while True:
            chunk = "".join(template.replace("{n}", str(i)) for i in range(n, n + behavior.quads_per_chunk))
            n += behavior.quads_per_chunk
            data = chunk.encode()
            self.wfile.write(data)
            self._entry["bodyBytesSent"] += len(data)
