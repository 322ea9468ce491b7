"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .campaign import CampaignConfig, Pingmesh, run_double_campaign, run_single_campaign
from .faults import FaultSpec, FaultType, Injector
from .manager import FailureReport, Manager
from .netmodel import FlowSpec, load_reference_topology, load_topology_file
from .oracle import Oracle
from .simkernel import Network


def _topology(args):
    return load_topology_file(args.topology) if args.topology else load_reference_topology()


def _fault(args):
    if not args.fault:
        return None
    loc = args.location
    if loc is None:
        raise SystemExit("--location is required with --fault")
    location = tuple(loc.split(",")) if "," in loc else loc
    params = dict(p.split("=", 1) for p in args.param)
    return FaultSpec.from_dict({"type": args.fault, "location": location, "params": params})


def _network(args, topo):
    net = Network(topo, seed=args.seed)
    net.converge()
    spec = _fault(args)
    if spec is not None:
        Injector(net).inject(spec)
        net.run_for(args.settle)
    return net, spec


def cmd_diagnose(args):
    topo = _topology(args)
    net, _ = _network(args, topo)
    if args.src and args.dst:
        pair = (args.src, args.dst)
    else:
        pair = Pingmesh(net).detect(args.rounds)
        if pair is None:
            print("no failing host pair detected")
            return 1
    flow = FlowSpec.parse(args.flow) if args.flow else None
    d = Manager(net).diagnose(FailureReport(pair[0], pair[1], flow))
    if args.json:
        print(json.dumps(d.to_dict(), indent=1, default=str))
    else:
        print(f"report: {pair[0]} -> {pair[1]}")
        print(f"verdict: {d.verdict} ({d.category})")
        print(f"runs: {d.runs_to_consensus}  primitives: {d.primitive_count}  "
              f"fault report: {d.used_fault_report}")
        print("scripts: " + " > ".join(s["script"] for s in d.scripts if s["run"] == 0))
    return 0


def cmd_inject(args):
    topo = _topology(args)
    net, spec = _network(args, topo)
    pair = Pingmesh(net).detect(args.rounds)
    print(f"fault: {spec.to_json() if spec else 'none'}")
    print(f"pingmesh: {'%s -> %s' % pair if pair else 'no failure'}")
    return 0


def cmd_campaign(args):
    types = tuple(FaultType(t) for t in args.types) if args.types else None
    cfg = CampaignConfig(seed=args.seed, runs_per_type=args.runs, topology=_topology(args))
    if types:
        cfg.types = types

    def progress(rec):
        if args.verbose:
            faults = ", ".join(f"{f['type']}@{f['location']}" for f in rec.faults)
            verdicts = ", ".join(d["verdict"] for d in rec.diagnoses)
            print(f"[{rec.index}] {faults}: {verdicts} {'ok' if rec.correct else 'WRONG'}",
                  file=sys.stderr)

    if args.kind == "single":
        res = run_single_campaign(cfg, progress)
    else:
        res = run_double_campaign(cfg, runs=args.runs, progress=progress)
    print(res.summary())
    if args.out:
        res.write_json(args.out)
    return 0


def cmd_oracle(args):
    topo = _topology(args)
    o = Oracle(topo)
    if args.query == "should-forward":
        s2, s1, flow = args.args
        print(o.should_forward(s2, s1, FlowSpec.parse(flow)))
    elif args.query == "path":
        src, dst = args.args
        paths = o.expected_path(src, dst)
        print(" ".join(paths[0]) if paths else "unreachable")
    elif args.query == "rib":
        for p, r in sorted(o.expected_rib(args.args[0]).items()):
            print(p, r.next_hop or "local", " ".join(map(str, r.as_path)), r.local_pref)
    elif args.query == "fib":
        for p, e in sorted(o.expected_fib(args.args[0]).items()):
            print(p, e.egress_if, e.source)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="netdx", description="network simulator and fault diagnosis")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--topology", help="topology file (default: bundled reference)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def fault_args(p):
        p.add_argument("--fault", choices=[t.value for t in FaultType])
        p.add_argument("--location", help="switch, link, or switch,peer")
        p.add_argument("--param", action="append", default=[], help="key=value fault parameter")
        p.add_argument("--settle", type=int, default=3_000_000, help="microseconds after injection")
        p.add_argument("--rounds", type=int, default=30, help="pingmesh rounds")

    p = sub.add_parser("diagnose", help="inject an optional fault and diagnose")
    fault_args(p)
    p.add_argument("--src")
    p.add_argument("--dst")
    p.add_argument("--flow")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("inject", help="inject a fault and run the pingmesh")
    fault_args(p)
    p.set_defaults(fn=cmd_inject)

    p = sub.add_parser("campaign", help="run a fault-injection campaign")
    p.add_argument("kind", choices=["single", "double"])
    p.add_argument("--runs", type=int, default=10, help="runs per type (single) or total (double)")
    p.add_argument("--types", nargs="*", choices=[t.value for t in FaultType])
    p.add_argument("--out", help="write JSON results here")
    p.set_defaults(fn=cmd_campaign)

    p = sub.add_parser("oracle", help="query the expected state")
    p.add_argument("query", choices=["should-forward", "path", "rib", "fib"])
    p.add_argument("args", nargs="+")
    p.set_defaults(fn=cmd_oracle)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
