"""Content policies, origin rules and the engine configuration.

The default :class:`EngineConfig` encodes the recommendations for engine
developers: origin-scoped sessions, GET-only traversal, bounded link paths,
guarded parsing and errors that never crash the query process.
:func:`audit_defaults` checks a configuration against them field by field.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Union
from urllib.parse import urlsplit

from .fetch import SEED, CACHE_MODES, FetchPolicy, Session
from .model import (
    IRI,
    Action,
    BlankNode,
    MalformedIri,
    Origin,
    SecurityEvent,
    SourcedQuad,
    Vulnerability,
    origin_of,
)
from .parser import ParseLimits
from .traversal import SEED_VIA, LinkQueueEntry, TraversalBudgets

__all__ = [
    "ContentPolicyRule",
    "Decision",
    "EngineConfig",
    "ConfigError",
    "SELF_ORIGIN_POLICY",
    "ENDPOINT_PREDICATE",
    "quad_admissible",
    "link_legitimate",
    "session_allowed",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "read_config_file",
    "apply_overrides",
    "merge_overrides",
    "preset",
    "audit_defaults",
]

ENDPOINT_PREDICATE = "https://ltqp.example/vocab#sparqlEndpoint"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ContentPolicyRule:
    """Who (``author_origin``) may say what about which subjects.

    ``author_origin`` is ``"*"``, a wildcard host suffix such as
    ``"*.pods.org"``, or an exact origin like ``"https://carol.pods.org"``.
    ``subject_scope`` is ``"selfOrigin"``, ``"anyOrigin"`` or an IRI prefix
    given as ``("iriPrefix", prefix)``.
    """

    effect: str = "allow"
    author_origin: str = "*"
    subject_scope: Union[str, tuple] = "selfOrigin"
    predicate_scope: Optional[frozenset] = None

    def __post_init__(self):
        if self.effect not in ("allow", "deny"):
            raise ConfigError(f"rule effect must be allow or deny, got {self.effect!r}")
        scope = self.subject_scope
        if not (scope in ("selfOrigin", "anyOrigin") or (isinstance(scope, tuple) and scope[0] == "iriPrefix")):
            raise ConfigError(f"bad subjectScope {scope!r}")
        if self.predicate_scope is not None:
            object.__setattr__(self, "predicate_scope", frozenset(self.predicate_scope))
        if "*" not in self.author_origin:
            try:
                Origin.parse(self.author_origin)
            except MalformedIri as exc:
                raise ConfigError(f"bad authorOrigin {self.author_origin!r}") from exc

    @property
    def exact_author(self) -> bool:
        return "*" not in self.author_origin

    def describe(self) -> str:
        scope = self.subject_scope if isinstance(self.subject_scope, str) else f"iriPrefix({self.subject_scope[1]})"
        preds = "" if self.predicate_scope is None else f", predicates={sorted(self.predicate_scope)}"
        return f"{self.effect}(author={self.author_origin}, subject={scope}{preds})"

    def author_matches(self, author: Origin) -> bool:
        pattern = self.author_origin
        if pattern == "*":
            return True
        if pattern.startswith("*."):
            suffix = pattern[2:].lower()
            return author.host == suffix or author.host.endswith("." + suffix)
        return Origin.parse(pattern) == author

    def applies(self, quad: SourcedQuad, author: Origin) -> bool:
        if not self.author_matches(author):
            return False
        if self.predicate_scope is not None and quad.triple.predicate.value not in self.predicate_scope:
            return False
        subject = quad.triple.subject
        if self.subject_scope == "anyOrigin":
            return True
        if self.subject_scope == "selfOrigin":
            return isinstance(subject, BlankNode) or origin_of(subject) == author
        return isinstance(subject, IRI) and subject.value.startswith(self.subject_scope[1])

    def to_dict(self) -> dict:
        out = {"effect": self.effect, "authorOrigin": self.author_origin}
        out["subjectScope"] = (
            self.subject_scope if isinstance(self.subject_scope, str) else {"iriPrefix": self.subject_scope[1]}
        )
        if self.predicate_scope is not None:
            out["predicateScope"] = sorted(self.predicate_scope)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ContentPolicyRule":
        scope = data.get("subjectScope", "selfOrigin")
        if isinstance(scope, dict):
            scope = ("iriPrefix", scope["iriPrefix"])
        preds = data.get("predicateScope")
        return cls(
            data.get("effect", "allow"),
            data.get("authorOrigin", "*"),
            scope,
            frozenset(preds) if preds is not None else None,
        )


SELF_ORIGIN_POLICY = (ContentPolicyRule("allow", "*", "selfOrigin"),)


@dataclass(frozen=True)
class Decision:
    admitted: bool
    rule: Optional[ContentPolicyRule] = None
    event: Optional[SecurityEvent] = None

    def __bool__(self) -> bool:
        return self.admitted


def quad_admissible(quad: SourcedQuad, rules: Iterable[ContentPolicyRule]) -> Decision:
    """Decide whether ``quad`` may enter query evaluation.

    With no rules everything is admitted. Otherwise the most specific
    applicable rule decides (exact author over wildcard, predicate-scoped over
    unscoped, deny over allow, then earlier over later); with no applicable
    rule the quad is rejected.
    """
    rules = tuple(rules)
    if not rules:
        return Decision(True)
    author = origin_of(quad.source)
    best = None
    best_key = None
    for index, rule in enumerate(rules):
        if not rule.applies(quad, author):
            continue
        key = (rule.exact_author, rule.predicate_scope is not None, rule.effect == "deny", -index)
        if best_key is None or key > best_key:
            best, best_key = rule, key
    if best is not None and best.effect == "allow":
        return Decision(True, best)
    reason = best.describe() if best is not None else "no rule allows it"
    event = SecurityEvent(
        Vulnerability.UNAUTHORIZED_STATEMENTS,
        Action.BLOCKED,
        f"statement about {_term_text(quad.triple.subject)} rejected by {reason}",
        quad.source.value,
    )
    return Decision(False, best, event)


def _term_text(term) -> str:
    return term.value if isinstance(term, IRI) else f"_:{term.label}"


def link_legitimate(
    entry: LinkQueueEntry,
    rules: Iterable[ContentPolicyRule] = (),
    quad: Optional[SourcedQuad] = None,
    heuristic: bool = True,
) -> bool:
    """Whether a link may count towards its target's priority.

    A link is illegitimate if the statement that produced it is not
    admissible, or (heuristic) if it comes from a page addressed with a query
    string, since such pages can be made to echo arbitrary URLs.
    """
    if quad is not None and not quad_admissible(quad, rules):
        return False
    if not heuristic or entry.via == SEED_VIA:
        return True
    return not urlsplit(entry.via).query


def session_allowed(target: Union[IRI, str], referrer_origin, session: Session, config: "EngineConfig") -> bool:
    if not config.session_scoping:
        return True
    if origin_of(target) != session.origin:
        return False
    return referrer_origin == SEED or referrer_origin == session.origin


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    parse_limits: ParseLimits = ParseLimits()
    fetch_policy: FetchPolicy = FetchPolicy()
    budgets: TraversalBudgets = TraversalBudgets()
    mode: str = "lenient"
    session_scoping: bool = True
    same_origin_intermediate: bool = True
    endpoint_allow_list: frozenset = frozenset()
    hybrid_enabled: bool = False
    cache_mode: str = "perQuery"
    content_policy: tuple = ()
    priority_mode: str = "fifo"
    link_legitimacy: bool = True
    media_type_guard: bool = True
    parallelism: int = 1
    endpoint_predicate: str = ENDPOINT_PREDICATE

    def __post_init__(self):
        if self.mode not in ("strict", "lenient"):
            raise ConfigError(f"mode must be strict or lenient, got {self.mode!r}")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"cacheMode must be one of {CACHE_MODES}, got {self.cache_mode!r}")
        if self.priority_mode not in ("fifo", "indegree"):
            raise ConfigError(f"priorityMode must be fifo or indegree, got {self.priority_mode!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        object.__setattr__(self, "content_policy", tuple(self.content_policy))
        object.__setattr__(self, "endpoint_allow_list", frozenset(self.endpoint_allow_list))


_SECTIONS = {
    "parseLimits": (
        "parse_limits",
        ParseLimits,
        {
            "maxIriBytes": "max_iri_bytes",
            "maxLiteralBytes": "max_literal_bytes",
            "maxDocumentBytes": "max_document_bytes",
            "maxQuadsPerDocument": "max_quads_per_document",
            "parseBudgetMillis": "parse_budget_millis",
        },
    ),
    "fetchPolicy": (
        "fetch_policy",
        FetchPolicy,
        {
            "maxRedirects": "max_redirects",
            "allowedSchemes": "allowed_schemes",
            "allowFileScheme": "allow_file_scheme",
            "timeoutSeconds": "timeout_seconds",
            "maxHeaderBytes": "max_header_bytes",
            "getOnly": "get_only",
        },
    ),
    "budgets": (
        "budgets",
        TraversalBudgets,
        {"maxDepth": "max_depth", "maxDocuments": "max_documents", "historyEnabled": "history_enabled"},
    ),
}
_SCALARS = {
    "mode": "mode",
    "sessionScoping": "session_scoping",
    "sameOriginIntermediate": "same_origin_intermediate",
    "hybridEnabled": "hybrid_enabled",
    "cacheMode": "cache_mode",
    "priorityMode": "priority_mode",
    "linkLegitimacy": "link_legitimacy",
    "mediaTypeGuard": "media_type_guard",
    "parallelism": "parallelism",
    "endpointPredicate": "endpoint_predicate",
}


def config_to_dict(config: EngineConfig) -> dict:
    out: dict = {}
    for key, (attr, _cls, fields) in _SECTIONS.items():
        section = getattr(config, attr)
        out[key] = {}
        for json_key, field_name in fields.items():
            value = getattr(section, field_name)
            out[key][json_key] = sorted(value) if isinstance(value, frozenset) else value
    for json_key, attr in _SCALARS.items():
        out[json_key] = getattr(config, attr)
    out["endpointAllowList"] = sorted(str(o) for o in config.endpoint_allow_list)
    out["contentPolicy"] = [rule.to_dict() for rule in config.content_policy]
    return out


def config_from_dict(data: dict) -> EngineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    kwargs: dict = {}
    try:
        for key, value in data.items():
            if key in _SECTIONS:
                attr, cls, fields = _SECTIONS[key]
                unknown = set(value) - set(fields)
                if unknown:
                    raise ConfigError(f"unknown {key} fields: {sorted(unknown)}")
                section = {fields[k]: v for k, v in value.items()}
                if "allowed_schemes" in section:
                    section["allowed_schemes"] = frozenset(section["allowed_schemes"])
                kwargs[attr] = cls(**section)
            elif key in _SCALARS:
                kwargs[_SCALARS[key]] = value
            elif key == "endpointAllowList":
                kwargs["endpoint_allow_list"] = frozenset(Origin.parse(o) for o in value)
            elif key == "contentPolicy":
                kwargs["content_policy"] = tuple(ContentPolicyRule.from_dict(r) for r in value)
            else:
                raise ConfigError(f"unknown configuration field {key!r}")
        return EngineConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def merge_overrides(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_overrides(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(config: EngineConfig, overrides: dict) -> EngineConfig:
    if not overrides:
        return config
    return config_from_dict(merge_overrides(config_to_dict(config), overrides))


def read_config_file(path: Union[str, Path]) -> tuple[dict, list]:
    """Raw overrides and ``sessions`` entries from a JSON config file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    sessions = data.pop("sessions", [])
    if not isinstance(sessions, list):
        raise ConfigError("sessions must be a list")
    return data, sessions


def load_config(path: Union[str, Path], base: EngineConfig = EngineConfig()) -> tuple[EngineConfig, list]:
    """Read a JSON config file over ``base``. Returns the config and any ``sessions`` entries."""
    overrides, sessions = read_config_file(path)
    return apply_overrides(base, overrides), sessions


def preset(name: str) -> EngineConfig:
    """``permissive`` is the plain default; ``hardened`` adds the self-origin content policy."""
    if name == "permissive":
        return EngineConfig()
    if name == "hardened":
        return replace(EngineConfig(), content_policy=SELF_ORIGIN_POLICY)
    raise ConfigError(f"unknown preset {name!r}")


@dataclass
class AuditLine:
    recommendation: str
    field: str
    ok: bool
    detail: str

    def to_dict(self) -> dict:
        return {"recommendation": self.recommendation, "field": self.field, "ok": self.ok, "detail": self.detail}


def audit_defaults(config: EngineConfig = EngineConfig()) -> list[AuditLine]:
    limits, fetch, budgets = config.parse_limits, config.fetch_policy, config.budgets
    lines = [
        AuditLine("same-origin policy for authentication sessions", "sessionScoping",
                  config.session_scoping is True, f"sessionScoping={config.session_scoping}"),
        AuditLine("only traverse using HTTP GET", "fetchPolicy.getOnly",
                  fetch.get_only is True, f"getOnly={fetch.get_only}"),
        AuditLine("restrict link path lengths", "budgets.maxDepth",
                  0 < budgets.max_depth <= 100, f"maxDepth={budgets.max_depth}"),
        AuditLine("restrict link path lengths", "budgets.historyEnabled",
                  budgets.history_enabled is True, f"historyEnabled={budgets.history_enabled}"),
        AuditLine("restrict link path lengths", "fetchPolicy.maxRedirects",
                  0 <= fetch.max_redirects <= 21, f"maxRedirects={fetch.max_redirects}"),
        AuditLine("sandbox parsing of untrusted data", "parseLimits.maxIriBytes",
                  limits.max_iri_bytes <= 1_048_576, f"maxIriBytes={limits.max_iri_bytes}"),
        AuditLine("sandbox parsing of untrusted data", "parseLimits.maxLiteralBytes",
                  limits.max_literal_bytes <= 1_048_576, f"maxLiteralBytes={limits.max_literal_bytes}"),
        AuditLine("sandbox parsing of untrusted data", "parseLimits.maxDocumentBytes",
                  limits.max_document_bytes <= 16_777_216, f"maxDocumentBytes={limits.max_document_bytes}"),
        AuditLine("sandbox parsing of untrusted data", "parseLimits.parseBudgetMillis",
                  limits.parse_budget_millis <= 10_000, f"parseBudgetMillis={limits.parse_budget_millis}"),
        AuditLine("sandbox parsing of untrusted data", "mediaTypeGuard",
                  config.media_type_guard is True, f"mediaTypeGuard={config.media_type_guard}"),
        AuditLine("sandbox parsing of untrusted data", "fetchPolicy.allowFileScheme",
                  fetch.allow_file_scheme is False, f"allowFileScheme={fetch.allow_file_scheme}"),
        AuditLine("errors do not crash the query process", "mode",
                  config.mode == "lenient", f"mode={config.mode}"),
    ]
    return lines
