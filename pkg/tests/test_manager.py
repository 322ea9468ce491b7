import pytest

from netdx.faults import FaultSpec, FaultType, Injector
from netdx.manager import NO_FAULT, FailureReport, Manager, Verdict
from netdx.netmodel import Action, AclRule, FlowSpec, Prefix, load_reference_topology
from netdx.simkernel import Network

P = Prefix.parse("10.3.8.0/24")
F = FaultType

CASES = [
    (F.SILENT_DROP_IN_SWITCH, "S17", {}, "FaultySwitch(S17)", "packet-forwarding", False),
    (F.SILENT_DROP_ON_LINK, "L23", {}, "FaultyLink(L23)", "packet-forwarding", False),
    (F.CORRUPTION_ON_LINK_IP, "L23", {}, "FaultyLink(L23)", "packet-transformation", True),
    (F.INCORRECT_DECREMENT_TTL, "S17", {}, "FaultySwitch(S17)", "packet-transformation", True),
    (F.PAYLOAD_CORRUPTION_IN_SWITCH, "S17", {}, "FaultySwitch(S17)", "packet-transformation", False),
    (F.INCORRECT_FORWARDING_DROP, "S10", {"flow": FlowSpec(dst=P)}, "FaultySwitch(S10)",
     "packet-forwarding", True),
    (F.FIB_DISCREPANCY, "S17", {"prefix": P}, "FaultySwitch(S17)", "dataplane-table-generation", True),
    (F.INGRESS_BGP_MODIFICATION, ("S17", "S10"), {"prefix": P}, "FaultySwitch(S17)",
     "route-adv-reception", True),
    (F.EGRESS_BGP_MODIFICATION, ("S10", "S17"), {"prefix": P}, "FaultySwitch(S10)",
     "route-adv-generation", True),
    (F.BGP_NEIGHBOR_MISSING, ("S10", "S17"), {}, "FaultySwitch(S10)", "external-interaction", True),
]


def faulted(ref_topo, ftype, loc, params, seed=3):
    net = Network(ref_topo, seed=seed)
    net.converge()
    Injector(net).inject(FaultSpec(ftype, loc, params))
    net.run_for(3_000_000)
    return net


@pytest.mark.parametrize("ftype, loc, params, verdict, category, report", CASES,
                         ids=[c[0].value for c in CASES])
def test_single_fault_diagnosis(ref_topo, ftype, loc, params, verdict, category, report):
    net = faulted(ref_topo, ftype, loc, params)
    d = Manager(net).diagnose(FailureReport("H7", "H3"))
    assert str(d.verdict) == verdict
    assert d.category == category
    assert d.used_fault_report is report
    assert d.runs_to_consensus >= 2
    assert d.run_verdicts[-1].key() == d.run_verdicts[-2].key()
    assert d.primitive_count == len(d.evidence) > 0


def test_daemon_crash_trail(ref_topo):
    net = faulted(ref_topo, F.ROUTING_DAEMON_CRASH, "S10", {})
    d = Manager(net).diagnose(FailureReport("H7", "H3"))
    assert str(d.verdict) == "FaultySwitch(S10)"
    assert d.used_disconnected
    trail = [s["script"] for s in d.scripts if s["run"] == 0]
    wanted = iter(["no_forwarding", "route_adv_missing", "neighbor_down", "disconnected"])
    step = next(wanted)
    for s in trail:
        if s == step:
            step = next(wanted, None)
    assert step is None, trail


def test_cleanup_leaves_no_residue(ref_topo):
    net = faulted(ref_topo, F.ROUTING_DAEMON_CRASH, "S10", {})
    Manager(net).diagnose(FailureReport("H7", "H3"))
    for sw in net.switches.values():
        assert sw.static_routes == [] and sw.secondary_ip is None
        assert sw.dp.trace_filter is None and not sw.dp.trigger.suppress
    assert not net.flows.get("S19")


def test_healthy_network(ref_net):
    d = Manager(ref_net).diagnose(FailureReport("H7", "H3"))
    assert d.verdict == NO_FAULT and not d.used_fault_report


def test_configured_deny_is_not_a_fault():
    topo = load_reference_topology()
    topo.configs["S10"].acl.append(AclRule(FlowSpec(dst=P), Action.DENY))
    net = Network(topo, seed=1)
    net.converge()
    d = Manager(net).diagnose(FailureReport("H7", "H3"))
    assert d.verdict.kind == "ConfigNotFault"


def test_consensus_requires_two_equal_runs(ref_net, monkeypatch):
    seq = iter([Verdict("FaultySwitch", switch="S1"), Verdict("FaultySwitch", switch="S2"),
                Verdict("FaultySwitch", switch="S2")])
    m = Manager(ref_net)
    t0 = ref_net.now
    monkeypatch.setattr(m, "run_once", lambda report: next(seq))
    d = m.diagnose(FailureReport("H7", "H3"))
    assert str(d.verdict) == "FaultySwitch(S2)" and d.runs_to_consensus == 3
    assert ref_net.now - t0 >= 2 * m.run_delay


def test_inconclusive_after_max_runs(ref_net, monkeypatch):
    flip = iter([Verdict("FaultySwitch", switch=f"S{i % 2}") for i in range(10)])
    m = Manager(ref_net)
    monkeypatch.setattr(m, "run_once", lambda report: next(flip))
    d = m.diagnose(FailureReport("H7", "H3"))
    assert d.verdict.kind == "Inconclusive" and d.runs_to_consensus == 5


def test_fib_loss_of_manager_subnet(ref_topo):
    # S14 cannot route back to the diagnosis host and looks disconnected
    net = faulted(ref_topo, F.FIB_DISCREPANCY, "S14", {"prefix": Prefix.parse("10.1.0.0/24")})
    d = Manager(net).diagnose(FailureReport("H0", "H5"))
    assert str(d.verdict) == "FaultySwitch(S14)"
    assert d.category == "dataplane-table-generation" and d.used_disconnected
    assert net.switches["S14"].agent.manager_ip == ref_topo.host_configs["H0"].ip
