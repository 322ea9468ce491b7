import hashlib
import json

import pytest

from netdx.agent import CHECKSUM_REPORT_CAP, READ_OPS, decode, encode
from netdx.dataplane import MIRROR_DSCP
from netdx.faults import FaultSpec, FaultType, Injector
from netdx.manager import AgentError, Manager
from netdx.netmodel import FlowSpec, Prefix

FLOW = FlowSpec(src=Prefix.parse("10.5.19.10/32"), dst=Prefix.parse("10.3.8.10/32"))


def direct(net, sid, doc):
    out = []
    net.switches[sid].agent.handle_command(doc, out.append)
    return out


def test_wire_round_trip():
    doc = {"v": 1, "id": 3, "op": "Ping", "args": {}}
    assert decode(encode(doc)) == doc
    with pytest.raises(ValueError):
        decode(encode(doc)[:-1])


def test_protocol_errors(ref_net):
    (r,) = direct(ref_net, "S3", {"v": 2, "id": 1, "op": "Ping"})
    assert not r["ok"] and "version" in r["error"]
    (r,) = direct(ref_net, "S3", {"v": 1, "id": 2, "op": "Reboot"})
    assert not r["ok"] and "unknown op" in r["error"]
    (r,) = direct(ref_net, "S3", {"v": 1, "id": 3, "op": "InstallStaticRoute",
                                   "args": {"prefix": "10.9.0.0/24", "next_hop": "S19"}})
    assert not r["ok"]


def _state_hash(net):
    parts = []
    for sid, sw in sorted(net.switches.items()):
        parts.append([sid, sorted(str(e) for e in sw.dp.fib.entries()),
                      sorted(str(r) for r in sw.speaker.rib.values()),
                      str(sw.dp.trace_filter), sw.dp.trigger.suppress, sorted(sw.static_routes)])
    return hashlib.sha256(json.dumps(parts, default=str).encode()).hexdigest()


def test_read_ops_do_not_mutate(ref_net):
    m = Manager(ref_net)
    before = _state_hash(ref_net)
    for op in sorted(READ_OPS):
        m.call("t", "S10", op)
    assert _state_hash(ref_net) == before


def test_remote_reads(ref_net):
    m = Manager(ref_net)
    assert m.call("t", "S12", "Ping") == {"switch": "S12"}
    sessions = m.call("t", "S17", "GetBgpSessions")
    assert sessions["S10"]["state"] == "Established"
    rib = m.call("t", "S19", "GetRib")
    assert any(e["prefix"] == "10.3.8.0/24" and e["next_hop"] == "S17" for e in rib)


def test_daemon_down_is_an_error(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.ROUTING_DAEMON_CRASH, "S3"))
    m = Manager(ref_net)
    # the crashed switch withdrew its loopback; reach it through a neighbor
    m.route["S3"] = ("relay", "S4")
    with pytest.raises(AgentError, match="not running"):
        m.call("t", "S3", "GetRib")


def test_fault_report_suppressed_until_reset(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.INCORRECT_FORWARDING_DROP, "S17",
                                       {"flow": FlowSpec(dst=Prefix.parse("10.3.8.0/24"))}))
    m = Manager(ref_net)
    m.call("t", "S19", "SetTraceFilter", flow=str(FLOW))
    m.call("t", "S19", "InjectFlow", flow=str(FLOW), count=500, interval=2000)
    m.wait(500_000)
    assert [r["switch"] for r in m.fault_reports] == ["S17"]
    assert m.fault_reports[0]["reason"] == "NoFibEntry"
    m.call("t", "S17", "ResetSuppressFlag")
    m.wait(100_000)
    assert len(m.fault_reports) == 2
    m.call("t", "S19", "ClearTraceFilter", stop_flows=True)


def test_checksum_reports_capped(ref_net):
    m = Manager(ref_net)
    m.call("t", "S19", "InjectFlow", flow=str(FLOW), count=3 * CHECKSUM_REPORT_CAP,
           interval=1000, dscp=MIRROR_DSCP)
    m.wait(200_000)
    per_switch = {}
    for c in m.checksums:
        per_switch[c["switch"]] = per_switch.get(c["switch"], 0) + 1
    assert per_switch == {s: CHECKSUM_REPORT_CAP for s in ["S19", "S17", "S10", "S9", "S8"]}


def test_relay(ref_net):
    m = Manager(ref_net)
    m.route["S10"] = ("relay", "S17")
    assert m.call("t", "S10", "Ping") == {"switch": "S10"}
    del m.route["S10"]
    res = m.call("t", "S17", "Relay", neighbor="S10", inner={"op": "Ping", "args": {}})
    assert res["reply"]["payload"] == {"switch": "S10"}
    with pytest.raises(AgentError, match="not a physical neighbor"):
        m.call("t", "S17", "Relay", neighbor="S3", inner={"op": "Ping", "args": {}})


def test_relay_timeout_when_agent_dead(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.AGENT_CRASH, "S10"))
    m = Manager(ref_net)
    with pytest.raises(AgentError, match="unreachable"):
        m.call("t", "S17", "Relay", neighbor="S10", inner={"op": "Ping", "args": {}})


def test_drop_and_marker_tests_clean(ref_net):
    m = Manager(ref_net)
    m.call("t", "S19", "SetTraceFilter", flow=str(FLOW))
    m.call("t", "S19", "InjectFlow", flow=str(FLOW), count=400, interval=2000)
    m.wait(20_000)
    sw, link = m.call_many("t", [("S17", "RunSwitchDropTest", {}),
                                 ("S17", "RunLinkMarkerTest", {"next_hop": "S10"})])
    assert sw["deficit"] == 0 and sw["ingress_sum"] > 50
    assert link["deficit"] == 0 and link["peer"] == "S10"


def test_static_route_and_secondary_ip(ref_net):
    m = Manager(ref_net)
    m.call("t", "S10", "SetSecondaryIp", ip="10.254.0.1")
    m.call("t", "S17", "InstallStaticRoute", prefix="10.254.0.1/32", next_hop="S10")
    fib = m.call("t", "S17", "GetFib")
    assert any(e["prefix"] == "10.254.0.1/32" and e["source"] == "static" for e in fib)
    m.call("t", "S17", "RemoveStaticRoute", prefix="10.254.0.1/32")
    assert not any(e["prefix"] == "10.254.0.1/32" for e in m.call("t", "S17", "GetFib"))


def test_churn_anomaly(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.ROUTE_OSCILLATION, "S10"))
    m = Manager(ref_net)
    ref_net.run_for(1_500_000)
    assert any(a["detector"] == "rib_churn" for a in m.anomalies)


def test_report_target_switch_and_restore(ref_net):
    agent = ref_net.switches["S3"].agent
    default = agent.manager_ip
    (r,) = direct(ref_net, "S3", {"v": 1, "id": 1, "op": "SetReportTarget",
                                   "args": {"ip": "10.1.0.11"}})
    assert r["ok"] and agent.manager_ip == Prefix.parse("10.1.0.11/32").network
    direct(ref_net, "S3", {"v": 1, "id": 2, "op": "SetReportTarget", "args": {"ip": None}})
    assert agent.manager_ip == default
