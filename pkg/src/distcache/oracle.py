"""Feasibility oracle for splitting object query rates over their two cache nodes.

A weight assignment is a *perfect matching* when every object's rate is fully
split over its edges and no cache node receives more than its capacity. Its
existence is decided exactly with a max-flow on integers: rates and capacities
are scaled by ``SCALE`` (rates rounded to nearest, capacities floored, so a
feasible scaled instance is feasible in the reals up to one quantum).
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .hashing import BipartiteGraph, ObjectId, graph_from_pairs, key_index, object_key

SCALE = 10**6
EXHAUSTIVE_MAX_NODES = 24

Node = tuple  # ("upper", i) | ("lower", j)


class InstanceFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class MatchingInstance:
    graph: BipartiteGraph
    rates: tuple[float, ...]
    capacity: float | Mapping[Node, float]

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if len(rates) != len(self.graph.left):
            raise ValueError("one rate per object required")
        if any(r < 0 or not math.isfinite(r) for r in rates):
            raise ValueError("rates must be finite and >= 0")
        caps = [self.capacity_of(v) for v in self.graph.right]
        if any(c <= 0 for c in caps):
            raise ValueError("capacities must be > 0")

    def capacity_of(self, v: Node) -> float:
        if isinstance(self.capacity, Mapping):
            return float(self.capacity[v])
        return float(self.capacity)

    @property
    def total_rate(self) -> float:
        return float(sum(self.rates))

    @property
    def total_capacity(self) -> float:
        return float(sum(self.capacity_of(v) for v in self.graph.right))


@dataclass
class MatchingAssignment:
    weights: dict
    feasible: bool
    flow: float
    cut_objects: frozenset = frozenset()

    def node_load(self, v: Node) -> float:
        return sum(w for (o, u), w in self.weights.items() if u == v)


def _scaled_rate(r: float) -> int:
    return int(math.floor(r * SCALE + 0.5))


def _scaled_cap(c: float) -> int:
    return int(math.floor(c * SCALE + 1e-9))


class _Dinic:
    def __init__(self, n: int):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[int] = []

    def add(self, u: int, v: int, c: int) -> int:
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(c)
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0)
        return len(self.to) - 2

    def _bfs(self, s: int, t: int) -> list[int] | None:
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.head[u]:
                if self.cap[e] > 0 and level[self.to[e]] < 0:
                    level[self.to[e]] = level[u] + 1
                    q.append(self.to[e])
        return level if level[t] >= 0 else None

    def _dfs(self, u: int, t: int, f: int, level, it) -> int:
        if u == t:
            return f
        edges = self.head[u]
        while it[u] < len(edges):
            e = edges[it[u]]
            v = self.to[e]
            if self.cap[e] > 0 and level[v] == level[u] + 1:
                pushed = self._dfs(v, t, min(f, self.cap[e]), level, it)
                if pushed:
                    self.cap[e] -= pushed
                    self.cap[e ^ 1] += pushed
                    return pushed
            it[u] += 1
        return 0

    def maxflow(self, s: int, t: int) -> int:
        total = 0
        while True:
            level = self._bfs(s, t)
            if level is None:
                return total
            it = [0] * self.n
            while True:
                f = self._dfs(s, t, 1 << 62, level, it)
                if not f:
                    break
                total += f

    def reachable(self, s: int) -> set[int]:
        seen = {s}
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.head[u]:
                if self.cap[e] > 0 and self.to[e] not in seen:
                    seen.add(self.to[e])
                    q.append(self.to[e])
        return seen


def solve_matching(inst: MatchingInstance) -> MatchingAssignment:
    """Decide matching feasibility by max-flow; return edge flows as weights.

    When infeasible, ``cut_objects`` is a set ``S`` of objects whose total rate
    exceeds the capacity of their neighbourhood (a violated cut).
    """
    g = inst.graph
    objects = g.left
    right = g.right
    k = len(objects)
    src, sink = 0, k + len(right) + 1
    right_index = {v: k + 1 + j for j, v in enumerate(right)}
    net = _Dinic(k + len(right) + 2)
    demand = 0
    for i, o in enumerate(objects):
        r = _scaled_rate(inst.rates[i])
        demand += r
        net.add(src, i + 1, r)
    edge_ids = {}
    for i, o in enumerate(objects):
        for v in g.nodes_of(o):
            if v not in right_index:
                raise ValueError(f"edge to unknown node {v}")
            edge_ids[(o, v)] = net.add(i + 1, right_index[v], _scaled_cap(inst.capacity_of(v)))
    for v in right:
        net.add(right_index[v], sink, _scaled_cap(inst.capacity_of(v)))
    flow = net.maxflow(src, sink)
    weights = {}
    for (o, v), e in edge_ids.items():
        f = net.cap[e ^ 1]
        if f:
            weights[(o, v)] = f / SCALE
    feasible = flow == demand
    cut = frozenset()
    if not feasible:
        reach = net.reachable(src)
        cut = frozenset(objects[i] for i in range(k) if (i + 1) in reach)
    return MatchingAssignment(weights, feasible, flow / SCALE, cut)


def verify_assignment(inst: MatchingInstance, a: MatchingAssignment, tol: float | None = None) -> list[str]:
    """Independent re-check of both matching conditions; returns violations."""
    g = inst.graph
    rtol = tol if tol is not None else 1e-6 * max(inst.total_rate, 1.0)
    problems = []
    for (o, v), w in a.weights.items():
        if (o, v) not in g.edges:
            problems.append(f"weight on non-edge {o.hex()}->{v}")
        if w < -rtol or w > inst.capacity_of(v) + rtol:
            problems.append(f"weight {w} out of [0, cap] on {o.hex()}->{v}")
    per_obj = {o: 0.0 for o in g.left}
    per_node = {v: 0.0 for v in g.right}
    for (o, v), w in a.weights.items():
        per_obj[o] = per_obj.get(o, 0.0) + w
        per_node[v] = per_node.get(v, 0.0) + w
    for i, o in enumerate(g.left):
        if abs(per_obj[o] - inst.rates[i]) > rtol:
            problems.append(f"object {o.hex()} served {per_obj[o]} != rate {inst.rates[i]}")
    for v in g.right:
        cap = inst.capacity_of(v)
        if per_node[v] > cap + 1e-6 * cap:
            problems.append(f"node {v} load {per_node[v]} > capacity {cap}")
    return problems


def check_expansion(g: BipartiteGraph) -> tuple[bool, frozenset | None]:
    """Hall check: does every object subset ``S`` have ``|N(S)| >= |S|``?

    Runs augmenting-path matching; if some object cannot be matched, the
    objects reachable from it by alternating paths form a deficient set.
    """
    match_node: dict = {}
    match_obj: dict = {}

    def augment(o, seen) -> bool:
        for v in g.nodes_of(o):
            if v in seen:
                continue
            seen.add(v)
            if v not in match_node or augment(match_node[v], seen):
                match_node[v] = o
                match_obj[o] = v
                return True
        return False

    for o in g.left:
        if not augment(o, set()):
            # alternating-path closure from the free object
            s = {o}
            q = deque([o])
            while q:
                u = q.popleft()
                for v in g.nodes_of(u):
                    w = match_node.get(v)
                    if w is not None and w not in s:
                        s.add(w)
                        q.append(w)
            return False, frozenset(s)
    return True, None


def brute_force_expansion(g: BipartiteGraph, max_objects: int = 22) -> tuple[bool, frozenset | None]:
    """Enumerate all 2^|U| object subsets and test ``|N(S)| >= |S|``."""
    n = len(g.left)
    if n > max_objects:
        raise ValueError(f"brute force limited to {max_objects} objects")
    right = {v: j for j, v in enumerate(g.right)}
    masks = np.array([sum(1 << right[v] for v in g.nodes_of(o)) for o in g.left], dtype=np.uint64)
    nb = np.zeros(1, dtype=np.uint64)
    for m in masks:
        nb = np.concatenate([nb, nb | m])
    sizes = np.bitwise_count(np.arange(1 << n, dtype=np.uint64))
    bad = np.nonzero(np.bitwise_count(nb) < sizes)[0]
    if bad.size == 0:
        return True, None
    sub = int(bad[0])
    return False, frozenset(g.left[i] for i in range(n) if sub >> i & 1)


@dataclass
class IntensityEntry:
    subset: frozenset
    arrival: float
    service: float
    rho: float


@dataclass
class IntensityReport:
    entries: list[IntensityEntry]
    rho_max: float
    argmax: frozenset | None
    pairs: dict = field(default_factory=dict)  # object -> its node pair D(i)
    mode: str = "exhaustive"


def _pair_rates(inst: MatchingInstance) -> dict:
    lam: dict = {}
    for i, o in enumerate(inst.graph.left):
        s = frozenset(inst.graph.nodes_of(o))
        lam[s] = lam.get(s, 0.0) + inst.rates[i]
    return lam


def _rho(inst: MatchingInstance, lam: dict, q: frozenset) -> IntensityEntry:
    num = sum(r for s, r in lam.items() if s <= q)
    mu = sum(inst.capacity_of(v) for v in q)
    return IntensityEntry(q, num, mu, num / mu if mu > 0 else 0.0)


def traffic_intensity(inst: MatchingInstance, mode: str = "exhaustive", samples: int = 0,
                      extra: Iterable[Iterable[Node]] = (), seed: int = 0) -> IntensityReport:
    """Traffic intensity ``rho_Q = sum_{S <= Q} lambda_S / mu_Q``.

    ``lambda_S`` is non-zero only for the node pairs that objects hash to.
    Exhaustive mode scans all non-empty ``Q`` (at most 2^24); sampled mode
    evaluates the pair sets, ``extra`` sets and ``samples`` random subsets.
    """
    g = inst.graph
    right = g.right
    lam = _pair_rates(inst)
    pairs = {o: frozenset(g.nodes_of(o)) for o in g.left}
    entries = [_rho(inst, lam, s) for s in sorted(lam, key=lambda s: sorted(s))]
    entries += [_rho(inst, lam, frozenset(q)) for q in extra]
    if mode == "exhaustive":
        n = len(right)
        if n > EXHAUSTIVE_MAX_NODES:
            raise ValueError(f"exhaustive mode is limited to {EXHAUSTIVE_MAX_NODES} nodes; use sampled mode")
        if not lam:
            return IntensityReport(entries, 0.0, None, pairs, mode)
        idx = {v: j for j, v in enumerate(right)}
        f = np.zeros(1 << n)
        for s, r in lam.items():
            f[sum(1 << idx[v] for v in s)] += r
        mu = np.zeros(1 << n)
        for v, j in idx.items():
            mu[1 << j] = inst.capacity_of(v)
        for j in range(n):
            # subset-sum transform along bit j
            fv = f.reshape(-1, 2, 1 << j)
            fv[:, 1, :] += fv[:, 0, :]
            mv = mu.reshape(-1, 2, 1 << j)
            mv[:, 1, :] += mv[:, 0, :]
        mu[0] = 1.0
        rho = f / mu
        best = int(np.argmax(rho))
        q = frozenset(v for v, j in idx.items() if best >> j & 1)
        return IntensityReport(entries, float(rho[best]), q, pairs, mode)
    if mode != "sampled":
        raise ValueError("mode must be 'exhaustive' or 'sampled'")
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        pick = rng.random(len(right)) < 0.5
        q = frozenset(v for v, p in zip(right, pick) if p)
        if q:
            entries.append(_rho(inst, lam, q))
    whole = _rho(inst, lam, frozenset(right))
    entries.append(whole)
    top = max(entries, key=lambda e: e.rho)
    return IntensityReport(entries, top.rho, top.subset, pairs, mode)


def lemma_instance(pairs: Sequence[tuple[int, int]], rates: Sequence[float], m_upper: int, m_lower: int,
                   capacity: float) -> MatchingInstance:
    return MatchingInstance(graph_from_pairs(pairs, m_upper, m_lower), tuple(rates), capacity)


def check_size_warning(k: int, m: int, beta: float = 3.0) -> None:
    if m > 1 and k > m**beta:
        warnings.warn(f"k={k} exceeds m^{beta:g}; outside the polynomial regime", stacklevel=2)


# ---- line-oriented instance format ---------------------------------------------------------
#   m0 m1 k capacity [scale]
#   index h0 h1 rate            (k rows)
# '#' starts a comment. Rates and capacity are in the same units.


def dump_instance(inst: MatchingInstance) -> str:
    g = inst.graph
    if isinstance(inst.capacity, Mapping):
        raise ValueError("the text format carries a single uniform capacity")
    lines = [f"{g.m_upper} {g.m_lower} {len(g.left)} {inst.capacity!r} {SCALE}"]
    for i, o in enumerate(g.left):
        (_, a), (_, b) = g.nodes_of(o)
        lines.append(f"{key_index(o)} {a} {b} {inst.rates[i]!r}")
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> MatchingInstance:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line.split()))
    if not rows:
        raise InstanceFormatError(1, "missing header 'm0 m1 k capacity'")
    lineno, head = rows[0]
    if len(head) not in (4, 5):
        raise InstanceFormatError(lineno, "header must be 'm0 m1 k capacity [scale]'")
    try:
        m0, m1, k = int(head[0]), int(head[1]), int(head[2])
        cap = float(head[3])
    except ValueError:
        raise InstanceFormatError(lineno, "header fields must be numeric") from None
    if m0 < 1 or m1 < 1 or k < 0 or cap <= 0:
        raise InstanceFormatError(lineno, "need m0, m1 >= 1, k >= 0, capacity > 0")
    body = rows[1:]
    if len(body) != k:
        where = body[k][0] if len(body) > k else (body[-1][0] if body else lineno)
        raise InstanceFormatError(where, f"expected {k} object rows, found {len(body)}")
    pairs, rates, seen = [], [], set()
    for lineno, f in body:
        if len(f) != 4:
            raise InstanceFormatError(lineno, "object row must be 'index h0 h1 rate'")
        try:
            idx, a, b, r = int(f[0]), int(f[1]), int(f[2]), float(f[3])
        except ValueError:
            raise InstanceFormatError(lineno, "object row fields must be numeric") from None
        if idx in seen:
            raise InstanceFormatError(lineno, f"duplicate object index {idx}")
        if not (0 <= a < m0 and 0 <= b < m1):
            raise InstanceFormatError(lineno, f"node pair ({a}, {b}) out of range")
        if r < 0:
            raise InstanceFormatError(lineno, "rate must be >= 0")
        seen.add(idx)
        pairs.append((idx, a, b))
        rates.append(r)
    g = graph_from_pairs([(a, b) for _, a, b in pairs], m0, m1)
    # keep the file's object indices as keys
    remap = {object_key(i): object_key(idx) for i, (idx, _, _) in enumerate(pairs)}
    g = BipartiteGraph(
        left=tuple(remap[o] for o in g.left),
        m_upper=m0,
        m_lower=m1,
        edges=frozenset((remap[o], v) for o, v in g.edges),
        adjacency={remap[o]: vs for o, vs in g.adjacency.items()},
        node_adjacency={v: tuple(remap[o] for o in os) for v, os in g.node_adjacency.items()},
    )
    return MatchingInstance(g, tuple(rates), cap)


def object_label(o: ObjectId) -> str:
    return str(key_index(o))
