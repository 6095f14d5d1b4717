"""Exhaustive join used as an independent reference for the engine's incremental join."""

import itertools

from ltqp_guard.query import Variable


def _constants_fit(pattern, triple):
    return all(isinstance(slot, Variable) or slot == term for slot, term in zip(pattern, triple))


def _unify(patterns, triples):
    binding = {}
    for pattern, triple in zip(patterns, triples):
        for slot, term in zip(pattern, triple):
            if isinstance(slot, Variable):
                if binding.setdefault(slot.name, term) != term:
                    return None
            elif slot != term:
                return None
    return binding


def brute_force(patterns, triples):
    """Every binding map produced by some choice of one triple per pattern.

    ``patterns`` are (s, p, o) tuples of terms or Variables, ``triples`` are
    (s, p, o) tuples of terms. Candidates are only pre-filtered on constants,
    so variable consistency is checked over the full cross product.
    """
    triples = list(set(triples))
    candidates = [[t for t in triples if _constants_fit(p, t)] for p in patterns]
    out = set()
    for combo in itertools.product(*candidates):
        binding = _unify(patterns, combo)
        if binding is not None:
            out.add(frozenset(binding.items()))
    return out


def pattern_tuple(pattern):
    return (pattern.subject, pattern.predicate, pattern.object)


def quad_tuple(quad):
    t = quad.triple
    return (t.subject, t.predicate, t.object)
