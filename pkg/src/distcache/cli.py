"""Command line: run experiment suites, check matching instances, dump partitions."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .allocation import compute_partitions
from .config import SUITES, ConfigError, ExperimentSpec, load_spec, parse_seeds
from .experiments import SUITE_ORDER, run_suite, worker_count
from .hashing import Partitioner
from .oracle import (EXHAUSTIVE_MAX_NODES, InstanceFormatError, check_expansion, object_label, parse_instance,
                     solve_matching, traffic_intensity)


def _node(v) -> str:
    return f"{v[0]}:{v[1]}"


def cmd_run(args) -> int:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    if args.seeds:
        spec = replace(spec, seeds=parse_seeds(args.seeds))
    out = Path(args.out or spec.out)
    suites = SUITE_ORDER if args.suite == "all" else (args.suite,)
    workers = worker_count(args.deterministic)
    ok = True
    for s in suites:
        t0 = time.perf_counter()
        res = run_suite(spec, s, out, workers)
        dt = time.perf_counter() - t0
        print(f"== {s} ({dt:.1f}s, {workers} worker{'s' if workers > 1 else ''}) -> {out}")
        for c in res.checks:
            print(f"  {'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
        if not res.checks:
            print("  (no thresholds)")
        ok &= res.passed
    return 0 if ok else 1


def cmd_verify(args) -> int:
    text = sys.stdin.read() if args.instance == "-" else Path(args.instance).read_text()
    inst = parse_instance(text)
    a = solve_matching(inst)
    g = inst.graph
    mode = "exhaustive" if len(g.right) <= EXHAUSTIVE_MAX_NODES else "sampled"
    rho = traffic_intensity(inst, mode=mode, samples=4096)
    expands, witness = check_expansion(g)
    report = {
        "objects": len(g.left),
        "nodes": len(g.right),
        "total_rate": inst.total_rate,
        "total_capacity": inst.total_capacity,
        "feasible": a.feasible,
        "max_flow": a.flow,
        "rho_max": rho.rho_max,
        "rho_mode": mode,
        "rho_argmax": sorted(_node(v) for v in rho.argmax) if rho.argmax else [],
        "expansion": expands,
        "expansion_witness": sorted(int(object_label(o)) for o in witness) if witness else [],
    }
    if a.feasible:
        report["assignment"] = [[int(object_label(o)), _node(v), w] for (o, v), w in sorted(a.weights.items())]
    else:
        report["cut_objects"] = sorted(int(object_label(o)) for o in a.cut_objects)
    if args.json:
        print(json.dumps(report, indent=1, sort_keys=True))
        return 0
    print(f"objects {report['objects']}  nodes {report['nodes']}  "
          f"rate {inst.total_rate:g}  capacity {inst.total_capacity:g}")
    print(f"feasible: {'yes' if a.feasible else 'no'} (max flow {a.flow:g})")
    print(f"rho_max: {rho.rho_max:.6g} ({mode}) on {{{', '.join(report['rho_argmax'])}}}")
    print(f"expansion: {'holds' if expands else 'fails'}"
          + (f", deficient objects {report['expansion_witness']}" if witness else ""))
    if a.feasible:
        for o, v, w in report["assignment"]:
            print(f"  {o} -> {v} {w:g}")
    else:
        print(f"violated cut: objects {report['cut_objects']}")
    return 0


def cmd_partition_dump(args) -> int:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    cfg = spec.system.with_(seed=args.seed) if args.seed is not None else spec.system
    topo = cfg.topology
    pmap = compute_partitions(Partitioner(*cfg.hash_seeds, topo.spines, topo.racks))
    for node in args.fail or ():
        pmap = pmap.fail(node)
    sys.stdout.write(pmap.dump())
    return 0


def cmd_selftest(args) -> int:
    from .checks import expansion_agreement, oracle_agreement

    ok = True
    for name, res in (("matching vs cut enumeration", oracle_agreement(args.trials, args.seed)),
                      ("expansion vs subset enumeration", expansion_agreement(max(1, args.trials * 2 // 5), args.seed))):
        print(f"{'PASS' if res.ok else 'FAIL'} {name}: {res.agree}/{res.trials} agree, "
              f"{res.bad_assignments} bad, {res.seconds:.2f}s")
        ok &= res.ok
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distcache", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment suite")
    r.add_argument("--suite", required=True, choices=SUITES + ("all",))
    r.add_argument("--config", help="experiment file ([experiment], [topology], [system])")
    r.add_argument("--seeds", help="e.g. 1..5 or 1,3,9")
    r.add_argument("--out", help="output directory")
    r.add_argument("--deterministic", action="store_true", help="single worker")
    r.set_defaults(fn=cmd_run)
    v = sub.add_parser("verify", help="check a matching instance file ('-' for stdin)")
    v.add_argument("instance")
    v.add_argument("--json", action="store_true")
    v.set_defaults(fn=cmd_verify)
    d = sub.add_parser("partition-dump", help="print the partition map")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--fail", type=int, action="append", help="upper node to mark failed (repeatable)")
    d.set_defaults(fn=cmd_partition_dump)
    s = sub.add_parser("selftest", help="oracle equivalence checks")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InstanceFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
