"""Link-traversal query processing with guards against hostile Linked Data."""

from .engine import Engine, EngineFault, QueryExecution, evaluate
from .fetch import Dereferencer, DocumentCache, Session, SessionStore
from .model import IRI, BlankNode, Literal, Origin, SecurityEvent, SourcedQuad, Triple, Vulnerability
from .parser import LimitExceeded, ParseLimits, RdfSyntaxError, parse_document_stream
from .policy import ConfigError, ContentPolicyRule, EngineConfig, audit_defaults, load_config, preset
from .query import Query, ResultRow, TriplePattern, Variable, parse_query
from .report import AuditReport

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "BlankNode",
    "ConfigError",
    "ContentPolicyRule",
    "Dereferencer",
    "DocumentCache",
    "Engine",
    "EngineConfig",
    "EngineFault",
    "IRI",
    "LimitExceeded",
    "Literal",
    "Origin",
    "ParseLimits",
    "Query",
    "QueryExecution",
    "RdfSyntaxError",
    "ResultRow",
    "SecurityEvent",
    "Session",
    "SessionStore",
    "SourcedQuad",
    "Triple",
    "TriplePattern",
    "Variable",
    "Vulnerability",
    "audit_defaults",
    "evaluate",
    "load_config",
    "parse_document_stream",
    "parse_query",
    "preset",
]
