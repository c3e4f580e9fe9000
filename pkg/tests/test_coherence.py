import heapq

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distcache.cache_node import CacheNode
from distcache.coherence import (HOME, TIMEOUT, ClientAck, CoherenceHarness, Invalidate, Phase, Send, StorageServer,
                                 Timer, Update, WriteTransaction, cache_receive, insert_hot_object)
from distcache.hashing import object_key

K = object_key(3)
UP, LO = ("upper", 0), ("lower", 0)


class Pump:
    """Deterministic delivery: unit latency, FIFO, optional drop filter."""

    def __init__(self, holders=(UP, LO), drop=lambda e, n: False, order="upper_first"):
        self.nodes = {v: CacheNode(i) for i, v in enumerate(holders)}
        self.server = StorageServer(lambda k: tuple(self.nodes), order=order)
        v0, ver = self.server.read(K)
        for n in self.nodes.values():
            n.install(K, v0, ver)
        self.q, self.seq, self.acks, self.sent = [], 0, [], 0
        self.drop = drop

    def push(self, now, effects):
        for e in effects:
            if isinstance(e, Send):
                self.sent += 1
                if self.drop(e, self.sent):
                    continue
                self._at(now + 0.001, ("msg", e))
            elif isinstance(e, Timer):
                self._at(e.at, ("timer", e))
            elif isinstance(e, ClientAck):
                self.acks.append(e.ack)

    def _at(self, t, item):
        self.seq += 1
        heapq.heappush(self.q, (t, self.seq, item))

    def run(self):
        while self.q:
            t, _, (kind, e) = heapq.heappop(self.q)
            if kind == "timer":
                self.push(t, self.server.on_timer(e.key, e.txid, e.attempt, t))
            elif e.dest == HOME:
                self.push(t, self.server.receive(e.msg, t))
            else:
                self.push(t, cache_receive(self.nodes[e.dest], e.dest, e.msg))

    def state(self):
        return {v: (n.peek(K).value, n.peek(K).version, n.peek(K).valid) for v, n in self.nodes.items()}


def test_write_reaches_every_copy():
    p = Pump()
    p.push(0.0, p.server.write(K, b"new", "c", 0.0))
    p.run()
    assert [a.version for a in p.acks] == [1]
    assert all(s == (b"new", 1, True) for s in p.state().values())
    assert p.server.in_flight() == 0


def test_dropped_invalidation_retransmits():
    clean = Pump()
    clean.push(0.0, clean.server.write(K, b"x", "c", 0.0))
    clean.run()
    lossy = Pump(drop=lambda e, n: n == 1)
    lossy.push(0.0, lossy.server.write(K, b"x", "c", 0.0))
    lossy.run()
    assert lossy.server.counts["retransmit"] == 1
    assert lossy.state() == clean.state()
    assert lossy.acks == clean.acks


def test_invalidation_chain_order():
    seen = []
    p = Pump(order="lower_first", drop=lambda e, n: seen.append(e.dest) or False)
    p.push(0.0, p.server.write(K, b"x", "c", 0.0))
    p.run()
    assert seen[:2] == [LO, UP]


def test_client_ack_only_after_invalidation():
    p = Pump()
    eff = p.server.write(K, b"x", "c", 0.0)
    assert not any(isinstance(e, ClientAck) for e in eff)
    inv = next(e for e in eff if isinstance(e, Send))
    assert isinstance(inv.msg, Invalidate)
    # while invalidating, caches must miss
    p.push(0.0, eff)
    heapq.heappop(p.q)
    cache_receive(p.nodes[UP], UP, inv.msg)
    assert p.nodes[UP].cache_get(K) is None


def test_give_up_restores_old_value():
    p = Pump(drop=lambda e, n: isinstance(e.msg, Invalidate) and e.dest == LO)
    old = p.server.read(K)[0]
    p.push(0.0, p.server.write(K, b"x", "c", 0.0))
    p.run()
    assert p.acks[-1].ok is False
    assert p.server.counts["failed"] == 1
    assert p.server.read(K) == (old, 1)
    assert p.state()[UP] == (old, 1, True)


def test_no_copies_acks_at_once():
    s = StorageServer(lambda k: ())
    eff = s.write(K, b"v", "c", 0.0)
    assert isinstance(eff[0], ClientAck) and s.read(K) == (b"v", 1)


def test_writes_serialize_per_key():
    p = Pump()
    p.push(0.0, p.server.write(K, b"a", "c1", 0.0))
    p.push(0.0, p.server.write(K, b"b", "c2", 0.0))
    p.run()
    assert [a.version for a in p.acks] == [1, 2]
    assert all(s == (b"b", 2, True) for s in p.state().values())


@pytest.mark.parametrize("fill_first", [True, False])
def test_insert_racing_write(fill_first):
    p = Pump(holders=(UP,))
    fresh = CacheNode(9)
    p.nodes[LO] = fresh
    if fill_first:
        _, eff = insert_hot_object(fresh, LO, K, p.server, 0.0)
        p.push(0.0, eff)
        p.push(0.0, p.server.write(K, b"w", "c", 0.0))
    else:
        p.push(0.0, p.server.write(K, b"w", "c", 0.0))
        _, eff = insert_hot_object(fresh, LO, K, p.server, 0.0)
        p.push(0.0, eff)
    p.run()
    final = p.server.read(K)
    e = fresh.peek(K)
    if e.valid:
        assert (e.value, e.version) == final


def test_late_update_after_reinsert_is_ignored():
    n = CacheNode(0)
    n.reserve(K)
    tok = n.peek(K).fill_token
    cache_receive(n, LO, Update(K, 4, b"old"))
    assert n.cache_get(K) is None
    cache_receive(n, LO, Update(K, 4, b"fill", tok))
    assert n.cache_get(K).value == b"fill"


def test_phases_forward_only():
    tx = WriteTransaction(1, "write", K, b"x", 1, pending_invalidations={UP})
    with pytest.raises(RuntimeError):
        tx.advance(Phase.ACKED_TO_CLIENT)
    tx.pending_invalidations.clear()
    tx.advance(Phase.UPDATING)
    with pytest.raises(RuntimeError):
        tx.advance(Phase.INVALIDATING)


def test_timers_are_stale_after_finish():
    p = Pump()
    eff = p.server.write(K, b"x", "c", 0.0)
    t = next(e for e in eff if isinstance(e, Timer))
    assert t.at == pytest.approx(TIMEOUT)
    p.push(0.0, eff)
    p.run()
    assert p.server.on_timer(K, t.txid, t.attempt, 1.0) == []


@given(st.integers(0, 10**6), st.sampled_from(["upper_first", "lower_first"]), st.integers(2, 4))
@settings(max_examples=15)
def test_harness_no_stale_reads(seed, order, replicas):
    r = CoherenceHarness(seed, drop=0.05, dup=0.05, order=order, replicas=replicas, churn=0.02).run(3000)
    assert r.stale_reads == 0 and r.regressions == 0
    assert r.operations == 3000
