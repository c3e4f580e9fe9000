"""Independent reference checks for the matching oracle and the expansion test.

These share no code with the flow solver: feasibility is decided by
enumerating every object subset ``S`` and evaluating the cut
``rate(U \\ S) + cap(N(S))``, whose minimum is the max-flow value.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from .hashing import graph_from_pairs
from .oracle import MatchingInstance, SCALE, brute_force_expansion, check_expansion, solve_matching, verify_assignment


def cut_enumeration_maxflow(inst: MatchingInstance) -> float:
    g = inst.graph
    objs = g.left
    rates = inst.rates
    k = len(objs)
    caps = {v: inst.capacity_of(v) for v in g.right}
    best = float(sum(rates))
    for mask in range(1, 1 << k):
        outside = 0.0
        nbr = set()
        for i in range(k):
            if mask >> i & 1:
                nbr.update(g.nodes_of(objs[i]))
            else:
                outside += rates[i]
        best = min(best, outside + sum(caps[v] for v in nbr))
    return best


def cut_enumeration_feasible(inst: MatchingInstance) -> bool:
    return cut_enumeration_maxflow(inst) >= sum(inst.rates) - 1e-9


def random_instance(rng: random.Random, max_objects: int = 8, max_nodes: int = 8, max_rate: int = 4,
                    max_cap: int = 4) -> MatchingInstance:
    n_nodes = rng.randint(2, max_nodes)
    m0 = rng.randint(1, n_nodes - 1)
    m1 = n_nodes - m0
    k = rng.randint(0, max_objects)
    pairs = [(rng.randrange(m0), rng.randrange(m1)) for _ in range(k)]
    rates = [rng.randint(0, max_rate) for _ in range(k)]
    return MatchingInstance(graph_from_pairs(pairs, m0, m1), tuple(rates), rng.randint(1, max_cap))


def random_graph(rng: random.Random, max_objects: int = 16, max_side: int = 10):
    m0, m1 = rng.randint(1, max_side), rng.randint(1, max_side)
    k = rng.randint(0, max_objects)
    return graph_from_pairs([(rng.randrange(m0), rng.randrange(m1)) for _ in range(k)], m0, m1)


def exact_assignment_check(inst: MatchingInstance, a) -> bool:
    """Both matching conditions in integer units of 1/SCALE, no tolerance."""
    served: dict = {}
    load: dict = {}
    for (o, v), w in a.weights.items():
        units = round(w * SCALE)
        served[o] = served.get(o, 0) + units
        load[v] = load.get(v, 0) + units
    for i, o in enumerate(inst.graph.left):
        if served.get(o, 0) != round(inst.rates[i] * SCALE):
            return False
    return all(load.get(v, 0) <= round(inst.capacity_of(v) * SCALE) for v in inst.graph.right)


@dataclass
class AgreementResult:
    trials: int
    agree: int
    feasible: int
    bad_assignments: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.agree == self.trials and self.bad_assignments == 0


def oracle_agreement(trials: int = 500, seed: int = 1) -> AgreementResult:
    rng = random.Random(seed)
    t0 = time.perf_counter()
    agree = feas = bad = 0
    for _ in range(trials):
        inst = random_instance(rng)
        a = solve_matching(inst)
        ref = cut_enumeration_feasible(inst)
        agree += a.feasible == ref
        if a.feasible:
            feas += 1
            if verify_assignment(inst, a) or not exact_assignment_check(inst, a):
                bad += 1
    return AgreementResult(trials, agree, feas, bad, time.perf_counter() - t0)


def expansion_agreement(trials: int = 200, seed: int = 1) -> AgreementResult:
    rng = random.Random(seed)
    t0 = time.perf_counter()
    agree = feas = bad = 0
    for _ in range(trials):
        g = random_graph(rng)
        ok, witness = check_expansion(g)
        ref, _ = brute_force_expansion(g)
        agree += ok == ref
        feas += ok
        if not ok:
            # the witness must itself violate Hall's condition
            nbr = set()
            for o in witness:
                nbr.update(g.nodes_of(o))
            bad += len(nbr) >= len(witness)
    return AgreementResult(trials, agree, feas, bad, time.perf_counter() - t0)
