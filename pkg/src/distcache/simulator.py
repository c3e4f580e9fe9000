"""Deterministic discrete-event simulation of a two-layer cache deployment.

Queries start at a client rack, are routed by the configured policy, visit at
most one cache node and one storage server, and the reply carries telemetry
stamps back to the client rack. Each node is a FIFO station with a service
rate. In ``loss`` mode service is deterministic and the queue is bounded
(arrivals to a full queue are dropped); in ``queue`` mode service is
exponential and queues are unbounded. Coherence packets are charged to the
stations they touch but are never dropped by a full queue.

Only cache lookups use a cache node's capacity; a query merely passing a
switch on its way to a server does not, but is lost if that switch is down.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .allocation import Budgets, HotSet, PartitionMap, diff_commands, refresh_hot_set, target_sets
from .cache_node import CacheNode
from .coherence import HOME, ClientAck, Send, StorageServer, Timer, cache_receive, insert_hot_object
from .config import SystemConfig
from .hashing import Partitioner, bucket_np, hash64_words, object_key
from .routing import LoadTable, Policy, Router, home_server, node_id
from .workload import QueryDistribution, QueryStream, value_for, zipf_probs

SAMPLE_DT = 0.1
SERVER_HASH_SEED = 0x51

# event priorities at equal timestamps
P_FAIL, P_REMAP, P_TICK, P_COH, P_TIMER, P_ARRIVE, P_REPLY, P_SAMPLE = range(8)


class InsufficientData(ValueError):
    pass


class Station:
    """FIFO server with analytic departures.

    ``deps`` holds departure times of queries currently in the system and is
    what the queue limit applies to. Background work (coherence packets) only
    pushes ``busy`` forward: it delays later queries but holds no buffer slot.
    """

    __slots__ = ("rate", "limit", "deps", "busy", "arrived", "dropped", "admitted", "work", "alive", "rng", "exp")

    def __init__(self, rate: float, limit: int | None, rng: random.Random | None = None):
        self.rate = rate
        self.limit = limit
        self.deps: deque = deque()
        self.busy = 0.0
        self.arrived = self.dropped = self.admitted = 0
        self.work = 0.0
        self.alive = True
        self.rng = rng
        self.exp = rng is not None

    def _service(self, work: float) -> float:
        return self.rng.expovariate(self.rate) * work if self.exp else work / self.rate

    def offer(self, t: float) -> float | None:
        deps = self.deps
        while deps and deps[0] <= t:
            deps.popleft()
        self.arrived += 1
        if self.limit is not None and len(deps) >= self.limit:
            self.dropped += 1
            return None
        d = (self.busy if self.busy > t else t) + self._service(1.0)
        self.busy = d
        deps.append(d)
        self.admitted += 1
        return d

    def charge(self, t: float, work: float) -> float:
        self.work += work
        self.busy = (self.busy if self.busy > t else t) + self._service(work)
        return self.busy

    def in_system(self, t: float) -> int:
        deps = self.deps
        while deps and deps[0] <= t:
            deps.popleft()
        return len(deps)


@dataclass
class SimReport:
    policy: str
    offered: float
    horizon: float
    warmup: float
    server_rate: float
    times: np.ndarray
    throughput: np.ndarray  # completions per sample bin, normalised by T
    queue: np.ndarray  # [samples, nodes] jobs in system at each sample instant
    served_series: np.ndarray  # [samples, nodes] departures per bin
    dropped_series: np.ndarray
    arrived_cum: np.ndarray  # [samples, nodes]
    node_names: list
    issued: int = 0
    completed: int = 0
    dropped: int = 0
    lost: int = 0
    failed_writes: int = 0
    issued_window: int = 0
    completed_window: int = 0
    dropped_window: int = 0
    hits: int = 0
    misses: int = 0
    coherence: dict = field(default_factory=dict)
    node_arrived: np.ndarray | None = None
    node_served: np.ndarray | None = None
    node_dropped: np.ndarray | None = None
    node_in_queue: np.ndarray | None = None

    @property
    def normalized_throughput(self) -> float:
        span = self.horizon - self.warmup
        return self.completed_window / span / self.server_rate if span > 0 else 0.0

    @property
    def loss_fraction(self) -> float:
        return self.dropped_window / self.issued_window if self.issued_window else 0.0

    @property
    def hit_ratio(self) -> float:
        n = self.hits + self.misses
        return self.hits / n if n else 0.0

    def mean_throughput(self, t0: float, t1: float) -> float:
        sel = (self.times > t0 + 1e-9) & (self.times <= t1 + 1e-9)
        return float(self.throughput[sel].mean()) if sel.any() else 0.0

    def node_rates(self) -> dict:
        span = self.horizon - self.warmup
        first = int(round(self.warmup / SAMPLE_DT))
        arr = self.arrived_cum[-1] - (self.arrived_cum[first - 1] if first > 0 else 0)
        return {n: float(a) / span for n, a in zip(self.node_names, arr)}


@dataclass(frozen=True)
class RunParams:
    policy: Policy = Policy.POT
    offered: float = 0.0  # queries/s
    horizon: float = 10.0
    warmup: float = 1.0
    mode: str = "loss"
    queue_limit: int = 32
    arrival: str = "fixed"
    link_latency: float = 20e-6
    coherence_cost: float = 0.5  # service units per coherence packet; a query is 1 (request + reply)
    refresh: bool = False
    heavy_hitters: bool | None = None  # feed the detectors; defaults to ``refresh``
    failures: tuple = ()  # (time, spine index)
    recoveries: tuple = ()
    detection_delay: float = 1.0
    telemetry: str = "running"
    window_phase: str = "aligned"  # "aligned": every switch resets on whole seconds; "random": per-switch offset
    sampler: str = "table"


@lru_cache(maxsize=8)
def _distribution(universe: int, skew: float) -> QueryDistribution:
    return zipf_probs(universe, skew)


def oracle_scores(dist: QueryDistribution, top: int) -> dict:
    """Exact popularity of the ``top`` most popular keys, used to pre-populate."""
    n = min(top, dist.universe)
    order = np.argsort(-dist.probs, kind="stable")[:n]
    return {object_key(int(r)): float(dist.probs[r]) for r in order}


@lru_cache(maxsize=32)
def _scores(universe: int, skew: float, top: int) -> dict:
    return oracle_scores(_distribution(universe, skew), top)


class Simulation:
    def __init__(self, cfg: SystemConfig, params: RunParams):
        self.cfg, self.params = cfg, params
        topo = cfg.topology
        if params.window_phase not in ("random", "aligned"):
            raise ValueError("window_phase must be 'random' or 'aligned'")
        if params.mode not in ("loss", "queue"):
            raise ValueError("mode must be 'loss' or 'queue'")
        if params.policy in (Policy.POT, Policy.PARTITION_ONLY, Policy.REPLICATION) and cfg.cache_per_node < 1:
            raise ValueError(f"policy {params.policy.value} needs cache slots (cache_per_node >= 1)")
        self.topo = topo
        for when, spine in tuple(params.failures) + tuple(params.recoveries):
            if not 0 <= spine < topo.spines:
                raise ValueError(f"unknown upper node {spine}")
            if when < 0:
                raise ValueError("event time must be >= 0")
        s0, s1 = cfg.hash_seeds
        self.p = Partitioner(s0, s1, topo.spines, topo.racks)
        self.pmap = PartitionMap(self.p, version=1)
        self.policy = params.policy
        self.budgets = Budgets.per_node_only(cfg.cache_per_node)
        self.dist = _distribution(cfg.universe, cfg.skew)
        self.scores = _scores(cfg.universe, cfg.skew, max(4 * cfg.cache_per_node * (topo.spines + topo.racks), 1000))
        limit = params.queue_limit if params.mode == "loss" else None
        srng = random.Random(cfg.derived_seed("svc")) if params.mode == "queue" else None
        self.m = topo.spines
        self.node_names = [("upper", i) for i in range(topo.spines)] + [("lower", j) for j in range(topo.racks)]
        self.node_names += [("server", r, s) for r in range(topo.racks) for s in range(topo.servers_per_rack)]
        self.index = {n: i for i, n in enumerate(self.node_names)}
        self.stations = [Station(topo.cache_rate if n[0] != "server" else topo.server_rate, limit, srng)
                         for n in self.node_names]
        self.caches = {n: CacheNode(node_id(n, self.m), slots=cfg.cache_per_node, telemetry=params.telemetry,
                                 track_hh=params.refresh if params.heavy_hitters is None else params.heavy_hitters)
                       for n in self.node_names[: topo.spines + topo.racks]}
        self.hot = HotSet()
        self.servers = {}
        for n in self.node_names[topo.spines + topo.racks:]:
            self.servers[n] = StorageServer(self._replicas)
        self.router = Router(self.policy, self.p, topo.servers_per_rack, seed=cfg.derived_seed("route"))
        self.tables = [LoadTable() for _ in range(topo.clients)]
        self.events: list = []
        self.seq = 0
        self.t = 0.0
        nb = int(math.ceil(params.horizon / SAMPLE_DT - 1e-9))
        self.nbins = nb
        nn = len(self.node_names)
        self.served_bins = np.zeros((nb + 1, nn), dtype=np.int64)
        self.dropped_bins = np.zeros((nb + 1, nn), dtype=np.int64)
        self.done_bins = np.zeros(nb + 1, dtype=np.int64)
        self.queue = np.zeros((nb, nn), dtype=np.int64)
        self.arrived_cum = np.zeros((nb, nn), dtype=np.int64)
        self.rep = dict(issued=0, completed=0, dropped=0, lost=0, failed_writes=0, issued_window=0,
                        completed_window=0, dropped_window=0, hits=0, misses=0)
        self.coh = dict(messages=0, invalidations=0, updates=0, fills=0, server_work=0.0)
        self._populate()

    # ---- setup ---------------------------------------------------------------------------

    def _replicas(self, key):
        out = [("upper", u) for u in self.hot.upper_nodes(key)]
        b = self.hot.lower_node(key)
        if b is not None:
            out.append(("lower", b))
        return out

    def _populate(self) -> None:
        pol = self.policy if self.policy is not Policy.SINGLE_HASH_UNIFORM else Policy.NOCACHE
        upper, lower = target_sets(pol, self.scores, self.pmap, self.budgets, self.topo.servers_per_rack)
        for layer, target in (("upper", upper), ("lower", lower)):
            for node, keys in target.items():
                for k in sorted(keys):
                    self.hot.add(layer, node, k)
                    self.caches[(layer, node)].install(k, self._server_of(k).read(k)[0], 0)

    def _home(self, key) -> tuple:
        return home_server(self.p, key, self.topo.servers_per_rack, SERVER_HASH_SEED)

    def _server_of(self, key) -> StorageServer:
        r, s = self._home(key)
        return self.servers[("server", r, s)]

    # ---- event plumbing ------------------------------------------------------------------

    def push(self, t: float, prio: int, kind: str, payload) -> None:
        self.seq += 1
        heapq.heappush(self.events, (t, prio, self.seq, kind, payload))

    def _bin(self, t: float) -> int:
        # smallest k with t <= k * SAMPLE_DT, computed exactly as the sample instants are
        k = max(int(math.ceil(t / SAMPLE_DT)), 1)
        while k * SAMPLE_DT < t:
            k += 1
        while k > 1 and (k - 1) * SAMPLE_DT >= t:
            k -= 1
        return k

    def _admit(self, node, t: float) -> float | None:
        i = self.index[node]
        d = self.stations[i].offer(t)
        if d is None:
            b = self._bin(t)
            if b <= self.nbins:
                self.dropped_bins[b, i] += 1
        else:
            b = self._bin(d)
            if b <= self.nbins:
                self.served_bins[b, i] += 1
        return d

    def _drop(self, t: float) -> None:
        self.rep["dropped"] += 1
        if t >= self.params.warmup:
            self.rep["dropped_window"] += 1

    def _complete(self, t: float) -> None:
        self.rep["completed"] += 1
        if self.params.warmup <= t <= self.params.horizon:
            self.rep["completed_window"] += 1
        b = self._bin(t)
        if b <= self.nbins:
            self.done_bins[b] += 1

    def _stamp(self, node) -> tuple:
        return node, self.caches[node].telemetry_load()

    # ---- data path -----------------------------------------------------------------------

    def _issue(self, t: float, rank: int, write: bool, client: int, home: tuple, i: int) -> None:
        key = object_key(rank)
        self.rep["issued"] += 1
        if t >= self.params.warmup:
            self.rep["issued_window"] += 1
        lat = self.params.link_latency
        if write:
            dest = self.router.route_set(key, home)
        else:
            dest = self.router.route_get(self.tables[client], key, self.hot, home)
        if dest.kind == "cache":
            node = dest.node
            via = None
            if node[0] == "lower" and not self.topo.bypass_upper_on_lower_hit and self.policy is not Policy.SINGLE_HASH_UNIFORM:
                via = self.router.pass_through()
                if not self._spine_up(via):
                    self.rep["lost"] += 1
                    self._drop(t)
                    return
            self.push(t + lat, P_ARRIVE, "cache", (node, key, client, via, home, rank))
        else:
            if not write:
                self.rep["misses"] += 1  # never looked up in a cache
            via = dest.via_upper
            if not self._spine_up(via):
                self.rep["lost"] += 1
                self._drop(t)
                return
            self.push(t + 2 * lat, P_ARRIVE, "server", (("server",) + home, key, client, via, write, rank, i))

    def _spine_up(self, s) -> bool:
        # None: the path crosses no spine; -1: every spine is down
        if s is None:
            return True
        return s >= 0 and self.stations[s].alive

    def _at_cache(self, t: float, payload) -> None:
        node, key, client, via, home, rank = payload
        st = self.stations[self.index[node]]
        if not st.alive:
            self.rep["lost"] += 1
            self._drop(t)
            return
        d = self._admit(node, t)
        if d is None:
            self._drop(t)
            return
        cache = self.caches[node]
        hit = cache.cache_get(key)
        lat = self.params.link_latency
        stamps = [self._stamp(node)]
        if via is not None:
            stamps.append(self._stamp(("upper", via)))
        if hit is not None:
            self.rep["hits"] += 1
            self.push(d + lat * (2 if via is None else 3), P_REPLY, "reply", (client, stamps, True))
            return
        self.rep["misses"] += 1
        # miss: continue to the home server through the home rack
        spine = node[1] if node[0] == "upper" else via
        self.push(d + lat, P_ARRIVE, "server", (("server",) + home, key, client, spine, False, rank, -1))

    def _at_server(self, t: float, payload) -> None:
        node, key, client, via, write, rank, i = payload
        tor = ("lower", node[1])
        if self.policy is not Policy.SINGLE_HASH_UNIFORM:
            self.caches[tor].observe_passing(key)  # the home ToR sees every query to its rack
        d = self._admit(node, t)
        if d is None:
            self._drop(t)
            return
        lat = self.params.link_latency
        if write:
            self.push(d, P_COH, "write", (node, key, client, rank, i))
            return
        stamps = []
        if self.policy is not Policy.NOCACHE and self.policy is not Policy.SINGLE_HASH_UNIFORM:
            stamps.append(self._stamp(tor))
            if via is not None and via >= 0:
                stamps.append(self._stamp(("upper", via)))
        self.push(d + 3 * lat, P_REPLY, "reply", (client, stamps, False))

    def _reply(self, t: float, payload) -> None:
        client, stamps, _hit = payload
        table = self.tables[client]
        for node, load in stamps:
            table.update(node, load, t)
        self._complete(t)

    # ---- coherence -----------------------------------------------------------------------

    def _effects(self, t: float, origin, key, effects) -> None:
        lat = self.params.link_latency
        srv_node = None
        for e in effects:
            if isinstance(e, Send):
                self.coh["messages"] += 1
                if origin is not None and origin[0] == "server":
                    self._charge_server(origin, t)
                if e.dest == HOME:
                    self.push(t + 2 * lat, P_COH, "coh", (("server",) + self._home(key), e.msg))
                else:
                    self.push(t + 2 * lat, P_COH, "coh", (e.dest, e.msg))
            elif isinstance(e, ClientAck):
                if e.ack.ok:
                    self._complete(t + 2 * lat)
                else:
                    self.rep["failed_writes"] += 1
                    self._drop(t)
            elif isinstance(e, Timer):
                srv_node = srv_node or ("server",) + self._home(key)
                self.push(e.at, P_TIMER, "timer", (srv_node, e))

    def _charge_server(self, node, t: float) -> None:
        cost = self.params.coherence_cost
        if cost > 0:
            self.coh["server_work"] += cost
            self.stations[self.index[node]].charge(t, cost)

    def _write(self, t: float, payload) -> None:
        node, key, client, rank, i = payload
        value = value_for(rank, max(i, 0) + 1)
        eff = self.servers[node].write(key, value, ("client", client, i), t)
        self._effects(t, node, key, eff)

    def _coh(self, t: float, payload) -> None:
        dest, msg = payload
        if dest[0] == "server":
            self._charge_server(dest, t)
            self._effects(t, dest, msg.key, self.servers[dest].receive(msg, t))
            return
        st = self.stations[self.index[dest]]
        if not st.alive:
            return
        if self.params.coherence_cost > 0:
            st.charge(t, self.params.coherence_cost)
        self.coh["invalidations" if type(msg).__name__ == "Invalidate" else "updates"] += 1
        self._effects(t, dest, msg.key, cache_receive(self.caches[dest], dest, msg))

    def _timer(self, t: float, payload) -> None:
        node, tm = payload
        self._effects(t, node, tm.key, self.servers[node].on_timer(tm.key, tm.txid, tm.attempt, t))

    # ---- control plane -------------------------------------------------------------------

    def _tick(self, t: float, node) -> None:
        if self.stations[self.index[node]].alive:
            self.caches[node].tick_second()

    def _refresh(self, t: float) -> None:
        if self.params.refresh and self.policy in (Policy.POT, Policy.PARTITION_ONLY, Policy.REPLICATION):
            reports = {n: c.hh_top_k(4 * self.cfg.cache_per_node) for n, c in self.caches.items()
                       if self.stations[self.index[n]].alive}
            cmds = refresh_hot_set(self.hot, reports, self.pmap, self.policy, self.budgets,
                                   self.topo.servers_per_rack)
            self._apply(t, cmds)

    def _apply(self, t: float, cmds) -> None:
        for c in cmds:
            node = (c.layer, c.node)
            if c.kind == "evict":
                self.hot.remove(c.layer, c.node, c.key)
                self.caches[node].evict(c.key)
            else:
                if not self.stations[self.index[node]].alive:
                    continue
                self.hot.add(c.layer, c.node, c.key)
                self.coh["fills"] += 1
                server = self._server_of(c.key)
                _, eff = insert_hot_object(self.caches[node], node, c.key, server, t)
                self._effects(t, ("server",) + self._home(c.key), c.key, eff)

    def _fail(self, t: float, spine: int) -> None:
        node = ("upper", spine)
        self.stations[self.index[node]].alive = False
        self.caches[node].entries.clear()
        self.push(t + self.params.detection_delay, P_REMAP, "remap", spine)

    def _remap(self, t: float, spine: int) -> None:
        if self.stations[self.index[("upper", spine)]].alive:
            return
        self.pmap = self.pmap.fail(spine)
        self.router.set_upper_alive([self.stations[self.index[("upper", i)]].alive for i in range(self.m)])
        self.hot.drop_node("upper", spine)
        self._retarget(t)

    def _recover(self, t: float, spine: int) -> None:
        node = ("upper", spine)
        self.stations[self.index[node]].alive = True
        self.pmap = self.pmap.recover(spine)
        self.router.set_upper_alive([self.stations[self.index[("upper", i)]].alive for i in range(self.m)])
        self._retarget(t)

    def _retarget(self, t: float) -> None:
        pol = self.policy
        if pol not in (Policy.POT, Policy.REPLICATION, Policy.PARTITION_ONLY):
            return
        upper, lower = target_sets(pol, self.scores, self.pmap, self.budgets, self.topo.servers_per_rack)
        self._apply(t, diff_commands(self.hot, upper, lower))

    # ---- main loop -----------------------------------------------------------------------

    def _sample(self, k: int) -> None:
        t = k * SAMPLE_DT
        row = k - 1
        for i, st in enumerate(self.stations):
            self.queue[row, i] = st.in_system(t)
            self.arrived_cum[row, i] = st.arrived

    def run(self) -> SimReport:
        prm = self.params
        topo = self.topo
        for t, s in prm.failures:
            self.push(t, P_FAIL, "fail", s)
        for t, s in prm.recoveries:
            self.push(t, P_FAIL, "recover", s)
        # each switch resets its counters on its own clock; the controller refreshes on whole seconds
        phase_rng = random.Random(self.cfg.derived_seed("phase"))
        for n in self.caches:
            ph = phase_rng.random() if prm.window_phase == "random" else 0.0
            for k in range(int(math.ceil(prm.horizon - ph)) + 1):
                if 0 < k + ph <= prm.horizon:
                    self.push(k + ph, P_TICK, "tick", n)
        for k in range(1, int(prm.horizon) + 1):
            self.push(float(k), P_TICK, "refresh", None)
        for k in range(1, self.nbins + 1):
            self.push(k * SAMPLE_DT, P_SAMPLE, "sample", k)
        handlers = {"cache": self._at_cache, "server": self._at_server, "reply": self._reply,
                    "coh": self._coh, "write": self._write, "timer": self._timer}
        stream = None
        if prm.offered > 0:
            dist = self.dist.with_rate(prm.offered)
            stream = QueryStream(dist, self.cfg.derived_seed("work"), self.cfg.write_ratio, topo.clients,
                                 prm.arrival, prm.sampler)
        blk_id, blk, pos, t_next = -1, None, 0, math.inf
        homes = None

        def load_block(b):
            bl = stream.block(b)
            lo = bl.ranks.astype(np.uint64)
            racks = self.p.h1_many(lo)
            srv = bucket_np(hash64_words(lo, None, self.p.seed0 ^ SERVER_HASH_SEED), topo.servers_per_rack)
            return (bl.ranks.tolist(), bl.is_write.tolist(), bl.client.tolist(), bl.times.tolist(),
                    list(zip(racks.tolist(), srv.astype(np.int64).tolist())))

        if stream is not None:
            blk_id = 0
            ranks, writes, clients, times, homes = load_block(0)
            t_next = times[0]
        qi = 0
        ev = self.events
        while True:
            t_ev = ev[0][0] if ev else math.inf
            if t_next <= t_ev and t_next < prm.horizon:
                self.t = t_next
                self._issue(t_next, ranks[pos], writes[pos], clients[pos], homes[pos], qi)
                qi += 1
                pos += 1
                if pos == len(ranks):
                    blk_id += 1
                    ranks, writes, clients, times, homes = load_block(blk_id)
                    pos = 0
                t_next = times[pos]
                continue
            if t_ev > prm.horizon or not ev:
                break
            t, _, _, kind, payload = heapq.heappop(ev)
            self.t = t
            if kind == "sample":
                self._sample(payload)
            elif kind == "tick":
                self._tick(t, payload)
            elif kind == "refresh":
                self._refresh(t)
            elif kind == "fail":
                self._fail(t, payload)
            elif kind == "remap":
                self._remap(t, payload)
            elif kind == "recover":
                self._recover(t, payload)
            else:
                handlers[kind](t, payload)
        return self._report()

    def _report(self) -> SimReport:
        prm = self.params
        times = np.arange(1, self.nbins + 1) * SAMPLE_DT
        h = prm.horizon
        in_q = np.array([st.in_system(h) for st in self.stations], dtype=np.int64)
        served = np.array([st.admitted for st in self.stations], dtype=np.int64) - in_q
        return SimReport(
            policy=self.policy.value, offered=prm.offered, horizon=h, warmup=prm.warmup,
            server_rate=self.topo.server_rate, times=times,
            throughput=self.done_bins[1:] / SAMPLE_DT / self.topo.server_rate,
            queue=self.queue, served_series=self.served_bins[1:], dropped_series=self.dropped_bins[1:],
            arrived_cum=self.arrived_cum, node_names=list(self.node_names),
            coherence=dict(self.coh, **{f"server_{k}": sum(s.counts[k] for s in self.servers.values())
                                        for k in ("invalidate", "update", "retransmit", "failed")}),
            node_arrived=np.array([st.arrived for st in self.stations], dtype=np.int64),
            node_served=served, node_dropped=np.array([st.dropped for st in self.stations], dtype=np.int64),
            node_in_queue=in_q, **self.rep,
        )


def run(cfg: SystemConfig, params: RunParams) -> SimReport:
    return Simulation(cfg, params).run()


def saturation_throughput(cfg: SystemConfig, params: RunParams, loss_target: float = 0.01,
                          rel_tol: float = 0.01) -> tuple[float, SimReport]:
    """Largest offered rate whose loss stays within ``loss_target``.

    Geometric bisection; every probe replays the same seeded stream, so the
    loss curve is close to monotone in the offered rate. Returns the
    normalised throughput measured at that rate and its report.
    """
    topo = cfg.topology
    base = topo.servers * topo.server_rate
    ceiling = base + (topo.spines + topo.racks) * topo.cache_rate

    def probe(rate):
        rep = run(cfg, _with_rate(params, rate))
        return rep.loss_fraction <= loss_target, rep

    ok, rep = probe(base)
    lo, hi = (base, ceiling) if ok else (base / 64, base)
    best = rep if ok else None
    if not ok:
        ok_lo, rep_lo = probe(lo)
        if not ok_lo:
            return rep_lo.normalized_throughput, rep_lo
        best = rep_lo
    else:
        ok_hi, rep_hi = probe(hi)
        if ok_hi:
            return rep_hi.normalized_throughput, rep_hi
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        ok, rep = probe(mid)
        if ok:
            lo, best = mid, rep
        else:
            hi = mid
    return best.normalized_throughput, best


def _with_rate(params: RunParams, rate: float) -> RunParams:
    from dataclasses import replace

    return replace(params, offered=rate)


# ---- theory queue model ------------------------------------------------------------------------


def queue_model_run(rates, choices, capacities, horizon: float, seed: int, policy: str = "pot",
                    sample_dt: float = 1.0) -> SimReport:
    """Continuous-time queueing model behind the stationarity lemmas.

    Object ``i`` issues Poisson queries at ``rates[i]``; ``choices[i]`` lists its
    one or two node indices. Under ``"pot"`` each query joins the shorter of the
    two queues (ties at random); under ``"single"`` it joins its only node. Nodes
    serve FIFO with exponential service at ``capacities[j]``. Simulated by
    uniformisation, so every step is one potential event.
    """
    rates = np.asarray(rates, dtype=float)
    caps = np.asarray(capacities, dtype=float)
    n = caps.size
    lam = float(rates.sum())
    mu = float(caps.sum())
    total = lam + mu
    nsamp = int(math.floor(horizon / sample_dt + 1e-9))
    queue = np.zeros((nsamp, n), dtype=np.int64)
    arrived = np.zeros((nsamp, n), dtype=np.int64)
    times = np.arange(1, nsamp + 1) * sample_dt
    if nsamp < 1:
        raise InsufficientData("horizon shorter than one sample")
    rng = np.random.default_rng([seed, 0x0E0E])
    q = [0] * n
    arr = [0] * n
    obj_cdf = np.cumsum(rates) / lam if lam > 0 else None
    node_cdf = np.cumsum(caps) / mu
    ch = [tuple(c) for c in choices]
    t = 0.0
    k = 0
    CH = 1 << 15
    while k < nsamp:
        gaps = rng.exponential(1.0 / total, CH).tolist()
        u = (rng.random(CH) * total).tolist()
        pick_obj = np.searchsorted(obj_cdf, rng.random(CH), side="right").tolist() if lam > 0 else None
        pick_node = np.searchsorted(node_cdf, rng.random(CH), side="right").tolist()
        tie = rng.random(CH).tolist()
        for j in range(CH):
            t += gaps[j]
            while k < nsamp and t > times[k]:
                queue[k] = q
                arrived[k] = arr
                k += 1
            if k >= nsamp:
                break
            if u[j] < lam:
                c = ch[min(pick_obj[j], len(ch) - 1)]
                if policy == "pot" and len(c) == 2:
                    a, b = c
                    dest = a if q[a] < q[b] else b if q[b] < q[a] else (a if tie[j] < 0.5 else b)
                else:
                    dest = c[0]
                q[dest] += 1
                arr[dest] += 1
            else:
                v = min(pick_node[j], n - 1)
                if q[v]:
                    q[v] -= 1
    names = [("node", j) for j in range(n)]
    z = np.zeros_like(queue)
    return SimReport(policy=policy, offered=lam, horizon=horizon, warmup=0.0, server_rate=1.0, times=times,
                     throughput=np.zeros(nsamp), queue=queue, served_series=z, dropped_series=z,
                     arrived_cum=arrived, node_names=names, issued=int(arrived[-1].sum()))


def queue_stationarity_probe(report: SimReport, bound: int = 100, tol: float = 0.10,
                             min_samples: int = 8) -> tuple[bool, float]:
    """Stationarity verdict from the occupancy time series of a queue-mode run.

    Stationary iff the mean total queue over the last quarter is within ``tol``
    of the third quarter's mean and no node's queue ever reached ``bound``.
    The trend is the least-squares slope of the total queue over the second half.
    """
    q = np.asarray(report.queue)
    if q.ndim != 2 or q.shape[0] < min_samples:
        raise InsufficientData(f"need at least {min_samples} samples, got {q.shape[0] if q.ndim else 0}")
    total = q.sum(axis=1).astype(float)
    n = total.size
    q3 = total[n // 2: 3 * n // 4].mean()
    q4 = total[3 * n // 4:].mean()
    close = abs(q4 - q3) <= tol * max(q3, q4) if max(q3, q4) > 0 else True
    half = slice(n // 2, n)
    ts = np.asarray(report.times, dtype=float)[half]
    ys = total[half]
    trend = float(np.polyfit(ts, ys, 1)[0]) if np.ptp(ys) > 0 else 0.0
    return bool(close and q.max() < bound), trend
