"""Acceptance criteria; each test prints one PASS/FAIL line."""
import math

import pytest

from netdx.campaign import CampaignConfig, run_double_campaign, run_single_campaign
from netdx.faults import FaultSpec, FaultType, Injector
from netdx.manager import FailureReport, Manager, Verdict
from netdx.netmodel import FlowSpec
from netdx.oracle import Oracle
from netdx.simkernel import Network
from netdx.topogen import random_topology

SEED = 0


LINES = []


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, detail


@pytest.fixture(scope="module")
def single(ref_topo):
    return run_single_campaign(CampaignConfig(seed=SEED, topology=ref_topo))


@pytest.fixture(scope="module")
def double(ref_topo):
    return run_double_campaign(CampaignConfig(seed=SEED, topology=ref_topo), runs=100)


@pytest.mark.slow
def test_c1_single_campaign(single):
    rows = single.by_type()
    ok = len(single.runs) == 100 and single.correct() == 100 and all(
        r["runs"] == 10 for r in rows.values())
    report(1, ok, f"single campaign {single.correct()}/{len(single.runs)} correct")


@pytest.mark.slow
def test_c2_double_campaign(double):
    p1, p2 = double.mean_primitives(0), double.mean_primitives(1)
    ok = len(double.runs) == 100 and double.correct() == 100 and p1 > p2
    report(2, ok, f"double campaign {double.correct()}/{len(double.runs)} correct, "
                  f"mean primitives first {p1:.1f} vs second {p2:.1f}")


REPORT_HEAVY = (FaultType.INCORRECT_FORWARDING_DROP, FaultType.INCORRECT_DECREMENT_TTL,
                FaultType.CORRUPTION_ON_LINK_IP, FaultType.INGRESS_BGP_MODIFICATION,
                FaultType.EGRESS_BGP_MODIFICATION)
REPORT_MOST = (FaultType.FIB_DISCREPANCY, FaultType.BGP_NEIGHBOR_MISSING)
REPORT_NONE = (FaultType.SILENT_DROP_IN_SWITCH, FaultType.SILENT_DROP_ON_LINK,
               FaultType.PAYLOAD_CORRUPTION_IN_SWITCH)


@pytest.mark.slow
def test_c3_fault_report_usage(single):
    rows = single.by_type()
    bad = []
    for t in REPORT_HEAVY:
        r = rows[t.value]
        if r["reports"] < 0.8 * r["runs"]:
            bad.append(f"{t.value} {r['reports']}/{r['runs']}")
    for t in REPORT_MOST:
        r = rows[t.value]
        if r["reports"] < 8:
            bad.append(f"{t.value} {r['reports']}/{r['runs']}")
    for t in REPORT_NONE:
        if rows[t.value]["reports"]:
            bad.append(f"{t.value} {rows[t.value]['reports']}/{rows[t.value]['runs']}")
    usage = ", ".join(f"{k}={v['reports']}" for k, v in sorted(rows.items()))
    report(3, not bad, f"fault-report usage {usage}" + (f"; off: {bad}" if bad else ""))


def test_c4_daemon_crash_trail(ref_topo):
    net = Network(ref_topo, seed=SEED)
    net.converge()
    Injector(net).inject(FaultSpec(FaultType.ROUTING_DAEMON_CRASH, "S10"))
    net.run_for(3_000_000)
    d = Manager(net, Oracle(ref_topo)).diagnose(FailureReport("H7", "H3"))
    trail = [s["script"] for s in d.scripts if s["run"] == 0]
    want = ["no_forwarding", "route_adv_missing", "neighbor_down", "disconnected"]
    it = iter(trail)
    ordered = all(any(step == w for step in it) for w in want)
    ok = str(d.verdict) == "FaultySwitch(S10)" and ordered
    report(4, ok, f"daemon crash -> {d.verdict}; trail {' > '.join(trail)}")


def test_c5_oracle_matches_simulator():
    mismatched, sizes, ases = [], [], []
    for i in range(20):
        topo = random_topology(1000 + i)
        sizes.append(len(topo.switches))
        ases.append(len({c.asn for c in topo.configs.values()}))
        net = Network(topo, seed=i)
        net.converge()
        o = Oracle(topo)
        for s in topo.switches:
            if net.rib(s) != o.expected_rib(s) or net.fib(s) != o.expected_fib(s):
                mismatched.append((i, s))
                break
    report(5, not mismatched,
           f"oracle RIB/FIB equal on {20 - len(mismatched)}/20 random topologies "
           f"({min(ases)}-{max(ases)} ASes, {min(sizes)}-{max(sizes)} switches)")


def _traced_deficits(net, switches, flow, count, interval):
    for s in switches:
        net.switches[s].dp.trace_filter = flow
    win = net.switches[switches[0]].dp.window
    totals = {s: [0, 0] for s in switches}
    done = [False]

    def check(w):
        for s in switches:
            rep = net.switches[s].dp.silent_drop_check(w, net.now)
            totals[s][0] += rep.ingress_sum
            totals[s][1] += rep.deficit
        if not done[0]:
            net.kernel.schedule(win, check, w + 1, kind="test")

    net.kernel.schedule(win - net.now % win + 1000, check, net.now // win, kind="test")
    handle = net.inject_flow(switches[0], flow, count, interval=interval)
    net.run_for(count * interval + 3 * win)
    done[0] = True
    net.run_for(2 * win)
    return totals, handle


def test_c6_conservation(ref_topo):
    path = Oracle(ref_topo).expected_path("H7", "H3")[0]
    flow = FlowSpec.parse("src=10.5.19.10,dst=10.3.8.0/24,proto=UDP")
    net = Network(ref_topo, seed=SEED)
    net.converge()
    n = 10_000
    totals, _ = _traced_deficits(net, path, flow, n, 50)
    clean = all(t[1] == 0 for t in totals.values()) and all(t[0] >= n for t in totals.values())
    traced = min(t[0] for t in totals.values())

    net = Network(ref_topo, seed=SEED)
    net.converge()
    victim = path[len(path) // 2]
    Injector(net).inject(FaultSpec(FaultType.SILENT_DROP_IN_SWITCH, victim, {"p": 0.3}))
    totals, _ = _traced_deficits(net, path, flow, n, 50)
    arrived, deficit = totals[victim]
    expect = 0.3 * arrived
    sd = math.sqrt(arrived * 0.3 * 0.7)
    within = abs(deficit - expect) <= 0.15 * expect
    others = all(t[1] == 0 for s, t in totals.items() if s != victim)
    report(6, clean and within and others,
           f"fault-free deficit 0 over {traced} traced packets: {clean}; "
           f"p=0.3 at {victim}: deficit {deficit} of {arrived}, expected {expect:.0f} "
           f"(sd {sd:.0f}, band +-15%)")


def test_c7_churn_consensus(ref_net, monkeypatch):
    stamps = []
    flip = iter([Verdict("FaultySwitch", switch=f"S{i % 2}") for i in range(5)])
    m = Manager(ref_net)

    def fake(report_):
        stamps.append(ref_net.now)
        return next(flip)

    monkeypatch.setattr(m, "run_once", fake)
    d = m.diagnose(FailureReport("H7", "H3"))
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    flapping_ok = d.verdict.kind == "Inconclusive" and d.runs_to_consensus == 5

    # fault lands while sessions are still up; the first run sees a healthy path
    net = Network(ref_net.topo, seed=SEED)
    net.converge()
    Injector(net).inject(FaultSpec(FaultType.BGP_NEIGHBOR_MISSING, ("S10", "S17")))
    churn = Manager(net, Oracle(net.topo)).diagnose(FailureReport("H7", "H3"))
    seen = [str(v) for v in churn.run_verdicts]
    churn_ok = (str(churn.verdict) == "FaultySwitch(S10)" and churn.runs_to_consensus >= 2
                and seen[-1] == seen[-2])
    ok = flapping_ok and churn_ok and all(g >= 2_000_000 for g in gaps)
    report(7, ok, f"flapping verdicts -> {d.verdict.kind} after {d.runs_to_consensus} runs, "
                  f"min gap {min(gaps) / 1e6:.1f}s; fault during convergence: {' > '.join(seen)}")
