"""Experiment suites: the figure analogues and the theory probes.

Each suite expands into independent tasks (one per seed and sweep point). Tasks
run in a process pool, every task is a pure function of its inputs, and rows
are sorted before writing, so output is byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import io
import math
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checks import expansion_agreement, oracle_agreement
from .config import ConfigError, ExperimentSpec, SystemConfig, Topology, config_hash
from .hashing import Partitioner, object_key
from .oracle import check_size_warning, lemma_instance, solve_matching
from .routing import Policy
from .simulator import RunParams, queue_model_run, queue_stationarity_probe, run, saturation_throughput
from .workload import QueryDistribution, cap_max_rate, zipf_probs

QUEUE_LIMIT = 8
LEMMA2_HORIZON = 3000.0
LEMMA3_HORIZON = 500.0
FAIL_AT = 8.0
FAIL_HORIZON = 16.0
POLICY_ORDER = ("nocache", "partition", "replication", "distcache", "single_hash")


# ---- tasks -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    suite: str
    kind: str
    seed: int
    cfg: SystemConfig | None = None
    policy: str = ""
    tags: tuple = ()  # ((column, value), ...) identifying the sweep point
    opts: tuple = ()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _throughput_task(t: Task) -> list:
    opts = dict(t.opts)
    params = RunParams(policy=Policy.parse(t.policy), horizon=opts["horizon"], queue_limit=QUEUE_LIMIT)
    thr, rep = saturation_throughput(t.cfg, params, loss_target=opts["loss_target"])
    row = dict(t.tags)
    row.update(policy=t.policy, seed=t.seed, config_hash=config_hash(t.cfg), throughput=thr,
               offered_rate=rep.offered, loss=rep.loss_fraction, hit_ratio=rep.hit_ratio,
               coherence_messages=rep.coherence.get("messages", 0),
               server_coherence_work=rep.coherence.get("server_work", 0.0))
    return [("runs", row)]


def failed_spines(seed: int, spines: int, count: int) -> list[int]:
    return sorted(random.Random(seed * 7919 + 17).sample(range(spines), count))


def fail_phases(n: int) -> list[float]:
    """Evenly spaced offsets of the failure instant inside a telemetry window."""
    return [(i + 0.5) / n for i in range(n)]


def _failure_task(t: Task) -> list:
    opts = dict(t.opts)
    cfg = t.cfg
    base = RunParams(policy=Policy.POT, horizon=opts["horizon"], queue_limit=QUEUE_LIMIT)
    _, sat = saturation_throughput(cfg, base, loss_target=opts["loss_target"])
    r_sat = sat.offered
    down = failed_spines(t.seed, cfg.topology.spines, opts["fail_count"])
    out = []
    h = FAIL_HORIZON
    for load in (0.5, 1.0):
        for phase in fail_phases(opts["phases"]):
            at = FAIL_AT + phase
            params = replace(base, offered=load * r_sat, horizon=h, failures=tuple((at, s) for s in down))
            rep = run(cfg, params)
            remap = at + params.detection_delay
            pre = rep.mean_throughput(3.0, at)
            post = rep.mean_throughput(at + 0.2, remap)
            rec = rep.mean_throughput(remap + 1.5, h)
            common = dict(load=load, seed=t.seed, phase=phase, config_hash=config_hash(cfg))
            for tm, v in zip(rep.times, rep.throughput):
                out.append(("series", dict(common, time=float(tm), throughput=float(v))))
            out.append(("summary", dict(common, saturation_rate=r_sat, failed=" ".join(map(str, down)),
                                        fail_at=at, pre=pre, post_failure=post, recovered=rec,
                                        post_ratio=post / pre if pre else 0.0,
                                        recovered_ratio=rec / pre if pre else 0.0)))
    return out


def theory_partitioner(m: int, seed: int) -> Partitioner:
    cfg = SystemConfig(topology=Topology(spines=m, racks=m), seed=seed)
    return Partitioner(*cfg.hash_seeds, m, m)


def theory_workload(m: int, k: int, skew: float, utilization: float, capacity: float = 1.0,
                    enforce_half: bool = True) -> QueryDistribution:
    """Zipf over the ``k`` hot objects at total rate ``utilization * m * capacity``.

    With ``enforce_half`` no object may exceed half a node's capacity; the
    excess is water-filled onto colder objects.
    """
    check_size_warning(k, m)
    d = zipf_probs(k, skew, utilization * m * capacity)
    if enforce_half and d.rates.max() > capacity / 2:
        d = cap_max_rate(d, capacity / 2)
    if enforce_half and d.rates.max() > capacity / 2 * (1 + 1e-9):
        raise ConfigError("cannot keep every object under half a node's capacity")
    return d


def _lemma_rows(t: Task) -> list:
    opts = dict(t.opts)
    m, k = opts["m"], opts["k"]
    p = theory_partitioner(m, t.seed)
    keys = [object_key(i) for i in range(k)]
    common = dict(t.tags)
    common.update(seed=t.seed, m=m, k=k)
    if t.kind == "lemma3":
        rates = [1.0] * k
        choices = []
        for key in keys:
            layer, j = p.single(key)
            choices.append((j if layer == "upper" else m + j,))
        cap = opts["capacity"]
        rep = queue_model_run(rates, choices, [cap] * (2 * m), LEMMA3_HORIZON, t.seed, "single")
        stationary, trend = queue_stationarity_probe(rep)
        load = np.bincount([c[0] for c in choices], minlength=2 * m)
        overloaded = bool(load.max() * 1.0 > cap)
        return [("runs", dict(common, capacity=cap, max_node_rate=float(load.max()), overloaded=overloaded,
                              stationary=stationary, trend=trend, hit=overloaded and not stationary))]
    alpha = dict(t.tags)["utilization"]
    d = theory_workload(m, k, opts["skew"], alpha)
    pairs = [(p.h0(key), p.h1(key)) for key in keys]
    if t.kind == "lemma1":
        a = solve_matching(lemma_instance(pairs, d.rates, m, m, 1.0))
        return [("runs", dict(common, p_max_rate=float(d.rates.max()), feasible=a.feasible))]
    choices = [(a, m + b) for a, b in pairs]
    rep = queue_model_run(d.rates, choices, [1.0] * (2 * m), LEMMA2_HORIZON, t.seed, "pot")
    stationary, trend = queue_stationarity_probe(rep)
    rates = rep.arrived_cum[-1] / rep.horizon
    feasible = solve_matching(lemma_instance(pairs, d.rates, m, m, 1.0)).feasible
    return [("runs", dict(common, feasible=feasible, stationary=stationary, trend=trend,
                          max_node_rate=float(rates.max()), mean_queue=float(rep.queue.sum(axis=1).mean())))]


def _oracle_task(t: Task) -> list:
    a = oracle_agreement(500, t.seed)
    b = expansion_agreement(200, t.seed)
    return [("runs", dict(check="matching", seed=t.seed, trials=a.trials, agree=a.agree, feasible=a.feasible,
                          bad_assignments=a.bad_assignments)),
            ("runs", dict(check="expansion", seed=t.seed, trials=b.trials, agree=b.agree, feasible=b.feasible,
                          bad_assignments=b.bad_assignments))]


def run_task(t: Task) -> list:
    if t.kind == "throughput":
        return _throughput_task(t)
    if t.kind == "failure":
        return _failure_task(t)
    if t.kind in ("lemma1", "lemma2", "lemma3"):
        return _lemma_rows(t)
    if t.kind == "oracle":
        return _oracle_task(t)
    raise ValueError(f"unknown task kind {t.kind}")


# ---- suite expansion -------------------------------------------------------------------------

SWEEP = {
    # suite: (axis column, spec attribute, how a value changes the config)
    "fig8a": ("skew", "skews", lambda c, v: c.with_(skew=v, write_ratio=0.0)),
    "fig8b": ("cache_size", "cache_sizes", lambda c, v: c.with_(cache_per_node=v, skew=0.99, write_ratio=0.0)),
    "fig8c": ("racks", "rack_counts", lambda c, v: c.with_(spines=v, racks=v, skew=0.99, write_ratio=0.0)),
    "fig9a": ("write_ratio", "write_ratios", lambda c, v: c.with_(write_ratio=v, skew=0.9, cache_per_node=10)),
    "fig9b": ("write_ratio", "write_ratios", lambda c, v: c.with_(write_ratio=v, skew=0.99, cache_per_node=100)),
}
SUITE_ORDER = ("oracle", "lemma1", "lemma2", "lemma3", "fig8a", "fig8b", "fig8c", "fig9a", "fig9b", "fig10")


def expand(spec: ExperimentSpec, suite: str) -> list[Task]:
    base = spec.system
    opts = (("horizon", spec.horizon), ("loss_target", spec.loss_target))
    if suite in SWEEP:
        col, attr, change = SWEEP[suite]
        tasks = []
        for v in getattr(spec, attr):
            for pol in spec.policies:
                for s in spec.seeds:
                    cfg = change(base, v).with_(seed=s)
                    tasks.append(Task(suite, "throughput", s, cfg, pol, ((col, v),), opts))
        return tasks
    if suite == "fig10":
        topo = replace(base.topology, spines=spec.fail_spines, racks=spec.fail_racks)
        cfg = replace(base, topology=topo, skew=0.99, write_ratio=0.0)
        o = opts + (("fail_count", spec.fail_count), ("phases", spec.fail_phases))
        return [Task(suite, "failure", s, cfg.with_(seed=s), "distcache", (), o) for s in spec.seeds]
    theory_seeds = range(1, spec.theory_seeds + 1)
    m = spec.theory_m
    k = base.k if base.k is not None else math.ceil(m * math.log(m))
    if suite in ("lemma1", "lemma2"):
        o = (("m", m), ("k", k), ("skew", base.skew))
        alphas = base.alphas if suite == "lemma1" else (0.8,)
        return [Task(suite, suite, s, None, "distcache", (("utilization", a),), o) for a in alphas
                for s in theory_seeds]
    if suite == "lemma3":
        o = (("m", m), ("k", m), ("capacity", 4.0))
        return [Task(suite, suite, s, None, "single_hash", (), o) for s in theory_seeds]
    if suite == "oracle":
        return [Task(suite, "oracle", s) for s in spec.seeds[:1]]
    raise ConfigError(f"unknown suite {suite!r}")


# ---- tables ----------------------------------------------------------------------------------


def _sort_key(row: dict):
    out = []
    for k, v in row.items():
        if k == "policy":
            v = POLICY_ORDER.index(v) if v in POLICY_ORDER else len(POLICY_ORDER)
        out.append((0, v) if isinstance(v, (int, float, np.integer, np.floating)) else (1, str(v)))
    return out


def sort_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=_sort_key)


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    cols = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def aggregate(rows: list[dict], axis: str) -> list[dict]:
    """(axis, policy, mean, stderr) per sweep point over seeds."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[axis], r["policy"]), []).append(r)
    out = []
    for (v, pol), rs in groups.items():
        x = np.array([r["throughput"] for r in rs], dtype=float)
        se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
        out.append({axis: v, "policy": pol, "mean": float(x.mean()), "stderr": se, "n": x.size,
                    "hit_ratio": float(np.mean([r["hit_ratio"] for r in rs])),
                    "seeds": " ".join(str(r["seed"]) for r in sorted(rs, key=lambda r: r["seed"])),
                    "config_hash": rs[0]["config_hash"] if len(rs) == 1 else _group_hash(rs)})
    return sort_rows(out)


def _group_hash(rs) -> str:
    import hashlib

    return hashlib.sha256(" ".join(sorted(r["config_hash"] for r in rs)).encode()).hexdigest()[:12]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteResult:
    suite: str
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ---- thresholds ------------------------------------------------------------------------------


def _curve(agg: list[dict], axis: str, policy: str) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted((r[axis], r["mean"]) for r in agg if r["policy"] == policy)
    return np.array([p[0] for p in pts], float), np.array([p[1] for p in pts], float)


def r_squared(x: np.ndarray, y: np.ndarray) -> float:
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid**2).sum()) / tot if tot > 0 else 1.0


def evaluate(suite: str, tables: dict) -> list[Check]:
    checks: list[Check] = []
    if suite == "fig8a":
        agg = tables["fig8a"]
        at = {(r["skew"], r["policy"]): r["mean"] for r in agg}
        need = ("nocache", "partition", "replication", "distcache")
        if all((0.99, p) in at for p in need):
            n, pa, rp, d = (at[(0.99, p)] for p in need)
            checks.append(Check("zipf-0.99 ordering nocache < partition < distcache", n < pa < d,
                                f"nocache={n:.2f} partition={pa:.2f} distcache={d:.2f}"))
            checks.append(Check("zipf-0.99 distcache >= 0.95 x replication", d >= 0.95 * rp,
                                f"distcache/replication={d / rp:.3f}"))
        if all((0.0, p) in at for p in need):
            vals = [at[(0.0, p)] for p in need]
            spread = (max(vals) - min(vals)) / max(vals)
            checks.append(Check("uniform: all policies within 2%", spread <= 0.02, f"spread={spread:.4f}"))
    elif suite == "fig8c":
        agg = tables["fig8c"]
        x, y = _curve(agg, "racks", "distcache")
        if x.size >= 3:
            r2 = r_squared(x, y)
            checks.append(Check("distcache linear in racks (R^2 >= 0.98)", r2 >= 0.98, f"R^2={r2:.4f}"))
        x, y = _curve(agg, "racks", "nocache")
        if x.size >= 3:
            gains = np.diff(y) / np.diff(x)
            ok = bool(np.all(np.diff(gains) < 0))
            checks.append(Check("nocache marginal gain strictly decreasing", ok,
                                "gains=" + ",".join(f"{g:.3f}" for g in gains)))
    elif suite == "fig9b":
        agg = tables["fig9b"]
        xs, rep = _curve(agg, "write_ratio", "replication")
        _, dist = _curve(agg, "write_ratio", "distcache")
        if xs.size and dist.size == xs.size:
            pos = xs > 0
            below = bool(np.all(rep[pos] <= dist[pos]))
            checks.append(Check("replication <= distcache for every write ratio > 0", below,
                                " ".join(f"{w:g}:{r:.2f}/{d:.2f}" for w, r, d in zip(xs, rep, dist))))
            rel = 1.0 - rep / dist
            widening = bool(np.all(np.diff(rel) > 0))
            checks.append(Check("relative gap widens with write ratio", widening,
                                "gap=" + ",".join(f"{g:.3f}" for g in rel)))
        caching = [p for p in ("partition", "replication", "distcache") if any(r["policy"] == p for r in agg)]
        _, noc = _curve(agg, "write_ratio", "nocache")
        if noc.size and caching:
            under = np.ones(noc.size, dtype=bool)
            for p in caching:
                _, y = _curve(agg, "write_ratio", p)
                under &= y < noc
            hit = [float(w) for w, u in zip(xs, under) if u]
            checks.append(Check("some write ratio puts every caching policy below nocache", bool(hit),
                                f"write ratios {hit}"))
    elif suite == "fig10":
        rows = tables["fig10_summary"]
        half = [r for r in rows if r["load"] == 0.5]
        full = [r for r in rows if r["load"] == 1.0]
        if half:
            pre = np.mean([r["pre"] for r in half])
            post = np.mean([r["post_failure"] for r in half])
            rec = np.mean([r["recovered"] for r in half])
            checks.append(Check("half load: throughput drops on failure", bool(post < pre),
                                f"pre={pre:.2f} post={post:.2f}"))
            checks.append(Check("half load: recovers within 2% after remap", bool(abs(rec / pre - 1) <= 0.02),
                                f"recovered/pre={rec / pre:.4f}"))
        if full:
            ratio = float(np.mean([r["post_ratio"] for r in full]))
            checks.append(Check("saturating load: post-failure ratio 0.75 +- 0.03", abs(ratio - 0.75) <= 0.03,
                                f"post/pre={ratio:.4f}"))
    elif suite in ("lemma1", "lemma2", "lemma3"):
        rows = tables[suite]
        if suite == "lemma3":
            hits = sum(bool(r["hit"]) for r in rows)
            need = math.ceil(0.30 * len(rows))
            checks.append(Check("single-hash: overloaded and non-stationary in >= 30%", hits >= need,
                                f"{hits}/{len(rows)}"))
        else:
            sel = [r for r in rows if abs(r["utilization"] - 0.8) < 1e-9]
            col = "feasible" if suite == "lemma1" else "stationary"
            ok = sum(bool(r[col]) for r in sel)
            if sel:
                checks.append(Check(f"{col} in >= 95% of seeds at utilization 0.8", ok >= math.ceil(0.95 * len(sel)),
                                    f"{ok}/{len(sel)}"))
    elif suite == "oracle":
        for r in tables["oracle"]:
            ok = r["agree"] == r["trials"] and r["bad_assignments"] == 0
            checks.append(Check(f"{r['check']} agrees with exhaustive reference", ok,
                                f"{r['agree']}/{r['trials']} bad={r['bad_assignments']}"))
    return checks


# ---- driver ----------------------------------------------------------------------------------


def worker_count(deterministic: bool = False) -> int:
    if deterministic:
        return 1
    env = os.environ.get("DISTCACHE_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"DISTCACHE_WORKERS must be an integer, got {env!r}") from None
        return max(1, n)
    return max(1, os.cpu_count() or 1)


def _build_tables(suite: str, results: list) -> dict:
    by_name: dict = {}
    for name, row in results:
        by_name.setdefault(name, []).append(row)
    tables = {}
    if suite in SWEEP:
        runs = sort_rows(by_name.get("runs", []))
        tables[f"{suite}_runs"] = runs
        tables[suite] = aggregate(runs, SWEEP[suite][0]) if runs else []
    elif suite == "fig10":
        tables["fig10"] = sort_rows(by_name.get("series", []))
        tables["fig10_summary"] = sort_rows(by_name.get("summary", []))
    else:
        tables[suite] = sort_rows(by_name.get("runs", []))
    return tables


def write_tables(tables: dict, out: Path, suffix: str = "") -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(tables):
        p = out / f"{name}{suffix}.csv"
        p.write_text(to_csv(tables[name]))
        paths.append(p)
    return paths


def run_suite(spec: ExperimentSpec, suite: str, out: str | Path | None = None, workers: int = 1) -> SuiteResult:
    tasks = expand(spec, suite)
    results: list = []
    out_dir = Path(out if out is not None else spec.out)
    try:
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for rows in pool.map(run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))):
                    results.extend(rows)
        else:
            for t in tasks:
                results.extend(run_task(t))
    except BaseException:
        if results:
            write_tables(_build_tables(suite, results), out_dir, suffix=".partial")
        raise
    tables = _build_tables(suite, results)
    write_tables(tables, out_dir)
    res = SuiteResult(suite, tables, evaluate(suite, tables))
    write_summary(res, out_dir)
    return res


def write_summary(res: SuiteResult, out: Path) -> Path:
    lines = [f"suite {res.suite}"]
    for c in res.checks:
        lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not res.checks:
        lines.append("no thresholds for this suite")
    p = out / f"{res.suite}_summary.txt"
    p.write_text("\n".join(lines) + "\n")
    return p
