import pytest
from hypothesis import given, strategies as st

from netdx.netmodel import (
    FilterPolicy, FlowSpec, Packet, PolicyAction, Prefix, Protocol, TopologyError, flow_matches,
    ip_int, ip_str, load_topology, serialize_topology,
)
from netdx.topogen import build_document, random_document

SMALL = """
[switches]
A 1 10.255.0.1 3
B 2 10.255.0.2 3
[hosts]
H0 A:1 10.1.0.10/24 10.1.0.1 diag
H1 B:1 10.2.0.10/24 10.2.0.1
[links]
L0 A:2 172.16.0.0/31 B:2 172.16.0.1/31
[bgp]
A B all all
B A all all
[acl]
[originate]
A 10.1.0.0/24
B 10.2.0.0/24
[static]
"""


def test_small_document_loads(ref_topo):
    t = load_topology(SMALL)
    assert t.switches == ["A", "B"]
    assert t.diagnosis_host == "H0"
    assert t.link_between("A", "B").link_id == "L0"
    assert t.port_toward("A", "B") == 2
    assert t.owner_of(ip_int("172.16.0.1")) == "B"
    assert t.host_by_ip(ip_int("10.2.0.10")) == "H1"


def test_reference_shape(ref_topo):
    assert len(ref_topo.switches) == 20
    assert len(ref_topo.hosts) == 9
    assert sorted(set(ref_topo.as_assignment.values())) == [1, 2, 3, 4, 5]
    assert ref_topo.diagnosis_host == "H0"


def test_serialize_round_trip(ref_topo):
    text = serialize_topology(ref_topo)
    again = load_topology(text)
    assert serialize_topology(again) == text
    assert again.switches == ref_topo.switches


@pytest.mark.parametrize("seed", range(5))
def test_random_round_trip(seed):
    t = load_topology(random_document(seed))
    assert serialize_topology(load_topology(serialize_topology(t))) == serialize_topology(t)


@pytest.mark.parametrize("mutation, needle", [
    (lambda s: s.replace("[hosts]", "[bogus]"), "unknown section"),
    (lambda s: s.replace("B 2 10.255.0.2 3", "A 2 10.255.0.2 3"), "duplicate switch"),
    (lambda s: s.replace("B:2 172.16.0.1/31", "B:9 172.16.0.1/31"), "no interface"),
    (lambda s: s.replace(" diag", ""), "diagnosis host"),
    (lambda s: s.replace("B A all all\n", ""), "no reverse session"),
    (lambda s: s.replace("172.16.0.1/31", "172.16.0.3/31"), "different subnets"),
])
def test_malformed_documents(mutation, needle):
    with pytest.raises(TopologyError) as exc:
        load_topology(mutation(SMALL))
    assert needle in str(exc.value)


def test_error_carries_line_number():
    bad = SMALL.replace("B 2 10.255.0.2 3", "B two 10.255.0.2 3")
    with pytest.raises(TopologyError) as exc:
        load_topology(bad)
    assert exc.value.line == 4


def test_disconnected_rejected():
    doc = build_document({"A": 1, "B": 1, "C": 2}, [("A", "B")], [("H0", "A", True)])
    with pytest.raises(TopologyError, match="not connected"):
        load_topology(doc)


def test_prefix_basics():
    p = Prefix.parse("10.3.0.0/16")
    assert p.contains(ip_int("10.3.200.1"))
    assert not p.contains(ip_int("10.4.0.1"))
    assert p.contains_prefix(Prefix.parse("10.3.8.0/24"))
    assert not Prefix.parse("10.3.8.0/24").contains_prefix(p)
    assert str(Prefix.covering(ip_int("10.3.8.77"), 24)) == "10.3.8.0/24"
    with pytest.raises(ValueError):
        Prefix.parse("10.3.0.1/16")


def test_flowspec_parse_and_str():
    f = FlowSpec.parse("dst=10.3.0.0/16,proto=TCP,dport=179")
    assert f.dst == Prefix.parse("10.3.0.0/16")
    assert f.protocol is Protocol.TCP and f.dst_port == 179
    assert FlowSpec.parse(str(f)) == f
    assert FlowSpec.parse("*").is_wildcard()
    with pytest.raises(ValueError):
        FlowSpec.parse("dport=70000")
    with pytest.raises(ValueError):
        FlowSpec.parse("color=red")


def test_policy_parse():
    pol = FilterPolicy.parse("own|reject@10.3.0.0/16@*|pref=150@*@4")
    assert pol.scope.value == "own"
    assert pol.clauses[0].action is PolicyAction.REJECT
    assert pol.clauses[1].action is PolicyAction.SET_LOCAL_PREF and pol.clauses[1].value == 150
    assert pol.clauses[1].asn == 4


def _brute_match(spec, pkt):
    # independent field-by-field comparison
    checks = [
        spec.src is None or (pkt.src_ip >> (32 - spec.src.length) if spec.src.length else 0)
        == (spec.src.network >> (32 - spec.src.length) if spec.src.length else 0),
        spec.dst is None or (pkt.dst_ip >> (32 - spec.dst.length) if spec.dst.length else 0)
        == (spec.dst.network >> (32 - spec.dst.length) if spec.dst.length else 0),
        spec.protocol is None or spec.protocol == pkt.protocol,
        spec.src_port is None or spec.src_port == pkt.src_port,
        spec.dst_port is None or spec.dst_port == pkt.dst_port,
    ]
    return all(checks)


prefixes = st.builds(lambda a, n: Prefix.covering(a, n), st.integers(0, 2**32 - 1), st.integers(0, 32))
specs = st.builds(FlowSpec, st.none() | prefixes, st.none() | prefixes,
                  st.none() | st.sampled_from([Protocol.TCP, Protocol.UDP, Protocol.ICMP]),
                  st.none() | st.integers(0, 3), st.none() | st.integers(0, 3))
packets = st.builds(lambda s, d, p, sp, dp: Packet(0, 0, s, d, p, src_port=sp, dst_port=dp),
                    st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
                    st.sampled_from([Protocol.TCP, Protocol.UDP, Protocol.ICMP]),
                    st.integers(0, 3), st.integers(0, 3))


@given(specs, packets)
def test_flow_matches_agrees_with_brute_force(spec, pkt):
    assert flow_matches(spec, pkt) == _brute_match(spec, pkt)


@given(st.integers(0, 2**32 - 1))
def test_ip_text_round_trip(v):
    assert ip_int(ip_str(v)) == v
