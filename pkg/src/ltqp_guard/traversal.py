"""Link extraction, the traversal frontier, budgets and document priority."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .model import IRI, Action, SecurityEvent, SourcedQuad, Vulnerability, strip_fragment

__all__ = [
    "SEED_VIA",
    "LinkQueueEntry",
    "TraversalBudgets",
    "Criterion",
    "Frontier",
    "EnqueueResult",
    "extract_links",
    "enqueue",
    "score_priority",
]

SEED_VIA = "seed"


@dataclass(frozen=True)
class LinkQueueEntry:
    target: str
    depth: int = 0
    via: str = SEED_VIA
    predicate: Optional[str] = None
    priority: float = 0.0


@dataclass(frozen=True)
class TraversalBudgets:
    max_depth: int = 100
    max_documents: int = 1000
    history_enabled: bool = True

    def __post_init__(self):
        if self.max_depth < 0 or self.max_documents <= 0:
            raise ValueError("traversal budgets must be positive")


@dataclass(frozen=True)
class Criterion:
    """Reachability criterion: follow every IRI, or only objects of some predicates."""

    kind: str = "all"
    predicates: frozenset = frozenset()

    @classmethod
    def match(cls, predicates: Iterable[str]) -> "Criterion":
        return cls("match", frozenset(predicates))

    def __post_init__(self):
        if self.kind not in ("all", "match"):
            raise ValueError(f"unknown reachability criterion {self.kind!r}")


def extract_links(quads: Iterable[SourcedQuad], criterion: Criterion = Criterion()) -> list[LinkQueueEntry]:
    out: list[LinkQueueEntry] = []
    seen: set[str] = set()
    for quad in quads:
        triple = quad.triple
        if criterion.kind == "all":
            candidates = (triple.subject, triple.object)
        elif triple.predicate.value in criterion.predicates:
            candidates = (triple.object,)
        else:
            continue
        for term in candidates:
            if not isinstance(term, IRI):
                continue
            target = strip_fragment(term)
            if target in seen or target == quad.source.value:
                # a document pointing at itself is not a link
                continue
            seen.add(target)
            out.append(LinkQueueEntry(target, quad.depth + 1, quad.source.value, triple.predicate.value))
    return out


@dataclass
class EnqueueResult:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


class Frontier:
    """Pending links ordered by (priority desc, insertion asc) plus dereference history."""

    def __init__(self, mode: str = "fifo"):
        if mode not in ("fifo", "indegree"):
            raise ValueError(f"unknown priority mode {mode!r}")
        self.mode = mode
        self.history: set[str] = set()
        self._pending: dict[str, LinkQueueEntry] = {}
        self._seq: dict[str, int] = {}
        self._heap: list = []
        self._counter = itertools.count()
        self._backlinks: dict[str, set] = {}

    def __len__(self) -> int:
        return len(self._pending)

    def __contains__(self, target: str) -> bool:
        return target in self._pending

    def pending(self) -> list[LinkQueueEntry]:
        return sorted(self._pending.values(), key=lambda e: (-e.priority, self._seq[e.target]))

    def indegree(self, target: str) -> int:
        return len(self._backlinks.get(target, ()))

    def note_backlink(self, target: str, via: str, legitimate: bool) -> None:
        """Record that ``via`` links to ``target``; only legitimate links raise priority."""
        if not legitimate or via == SEED_VIA or via == target:
            return
        referrers = self._backlinks.setdefault(target, set())
        if via in referrers:
            return
        referrers.add(via)
        entry = self._pending.get(target)
        if entry is not None and self.mode == "indegree":
            self._reprioritize(entry, float(len(referrers)))

    def _reprioritize(self, entry: LinkQueueEntry, priority: float) -> None:
        updated = LinkQueueEntry(entry.target, entry.depth, entry.via, entry.predicate, priority)
        self._pending[entry.target] = updated
        heapq.heappush(self._heap, (-priority, self._seq[entry.target], entry.target))

    def push(self, entry: LinkQueueEntry) -> None:
        priority = score_priority(self, entry, self.mode)
        entry = LinkQueueEntry(entry.target, entry.depth, entry.via, entry.predicate, priority)
        seq = next(self._counter)
        if entry.target in self._pending:
            # history disabled: a repeated target is queued again behind the first copy
            key = f"{entry.target}\x00{seq}"
        else:
            key = entry.target
        self._pending[key] = entry
        self._seq[key] = seq
        heapq.heappush(self._heap, (-priority, seq, key))

    def pop(self) -> Optional[LinkQueueEntry]:
        while self._heap:
            neg_priority, seq, key = heapq.heappop(self._heap)
            entry = self._pending.get(key)
            if entry is None or entry.priority != -neg_priority or self._seq[key] != seq:
                continue
            del self._pending[key]
            del self._seq[key]
            return entry
        return None

    def mark_dereferenced(self, target: str) -> None:
        self.history.add(target)


def score_priority(frontier: Frontier, entry: LinkQueueEntry, mode: str = "fifo") -> float:
    if mode == "fifo":
        return 0.0
    if mode == "indegree":
        return float(frontier.indegree(entry.target))
    raise ValueError(f"unknown priority mode {mode!r}")


def enqueue(
    frontier: Frontier,
    entry: LinkQueueEntry,
    budgets: TraversalBudgets = TraversalBudgets(),
    events: Optional[list] = None,
    scheme_allowed: Optional[Callable[[str], bool]] = None,
) -> EnqueueResult:
    events = events if events is not None else []
    if scheme_allowed is not None and not scheme_allowed(entry.target):
        events.append(
            SecurityEvent(
                Vulnerability.LEAKAGE,
                Action.BLOCKED,
                f"link with disallowed scheme dropped (from {entry.via})",
                entry.target,
            )
        )
        return EnqueueResult(False, "scheme")
    if budgets.history_enabled and (entry.target in frontier.history or entry.target in frontier):
        return EnqueueResult(False, "history")
    if entry.depth > budgets.max_depth:
        events.append(
            SecurityEvent(
                Vulnerability.TRAVERSAL_TRAP,
                Action.OBSERVED,
                f"link path length {entry.depth} exceeds limit {budgets.max_depth} (from {entry.via})",
                entry.target,
            )
        )
        return EnqueueResult(False, "depth")
    frontier.push(entry)
    return EnqueueResult(True)
