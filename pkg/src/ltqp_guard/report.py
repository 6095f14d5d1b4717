"""Audit report produced by every query run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .model import SecurityEvent, Vulnerability

__all__ = ["DocumentRecord", "ExploitMarker", "AuditReport"]


@dataclass
class DocumentRecord:
    url: str
    status: int
    bytes: int = 0
    from_cache: bool = False
    depth: int = 0
    request_url: Optional[str] = None
    media_type: str = ""
    quads: int = 0
    kind: str = "document"

    def to_dict(self) -> dict:
        out = {
            "url": self.url,
            "status": self.status,
            "bytes": self.bytes,
            "fromCache": self.from_cache,
            "depth": self.depth,
            "quads": self.quads,
            "mediaType": self.media_type,
        }
        if self.request_url and self.request_url != self.url:
            out["requestUrl"] = self.request_url
        if self.kind != "document":
            out["kind"] = self.kind
        return out


@dataclass
class ExploitMarker:
    scenario: str
    succeeded: bool
    evidence: str

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "succeeded": self.succeeded, "evidence": self.evidence}


@dataclass
class AuditReport:
    query_id: str
    config: dict
    documents_fetched: list = field(default_factory=list)
    events: list = field(default_factory=list)
    results: int = 0
    wall_millis: float = 0.0
    exploit_markers: list = field(default_factory=list)
    blocked_urls: set = field(default_factory=set)
    endpoints: list = field(default_factory=list)
    extra_provenance: dict = field(default_factory=dict)

    def events_of(self, vulnerability: Vulnerability, action=None) -> list[SecurityEvent]:
        return [
            e for e in self.events
            if e.vulnerability is vulnerability and (action is None or e.action == action)
        ]

    def fetched_urls(self) -> set[str]:
        urls = set()
        for record in self.documents_fetched:
            urls.add(record.url)
            if record.request_url:
                urls.add(record.request_url)
        return urls

    def to_dict(self) -> dict:
        out = {
            "queryId": self.query_id,
            "config": self.config,
            "documentsFetched": [d.to_dict() for d in self.documents_fetched],
            "events": [e.to_dict() for e in self.events],
            "results": self.results,
            "wallMillis": round(self.wall_millis, 3),
            "endpoints": [{"endpointUrl": e.endpoint_url, "discoveredIn": e.discovered_in} for e in self.endpoints],
        }
        if self.exploit_markers:
            out["exploitMarkers"] = [m.to_dict() for m in self.exploit_markers]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)
