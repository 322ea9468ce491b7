import pytest
from hypothesis import given, settings, strategies as st

from netdx.netmodel import FlowSpec, Prefix, load_topology
from netdx.oracle import Oracle, OracleError, compute_expected_state
from netdx.topogen import random_topology
from tests.test_netmodel import SMALL

P = Prefix.parse("10.3.8.0/24")


@pytest.fixture(scope="module")
def oracle(ref_topo):
    return Oracle(ref_topo)


def test_reference_paths(oracle):
    assert oracle.expected_path("H7", "H3") == [["S19", "S17", "S10", "S9", "S8"]]
    assert oracle.expected_path("H0", "S10") == [["S0", "S18", "S16", "S17", "S10"]]
    assert oracle.reachable("H0", "H8")


def test_should_forward(oracle):
    flow = FlowSpec.parse("src=10.5.19.10,dst=10.3.8.0/24")
    assert oracle.should_forward("S17", "S10", flow)
    assert not oracle.should_forward("S10", "S17", flow)
    assert oracle.on_path("S9", flow) and not oracle.on_path("S0", flow)
    assert oracle.upstream_of("S10", flow) == "S17"
    assert oracle.upstream_of("S19", flow) is None
    with pytest.raises(KeyError):
        oracle.should_forward("S99", "S1", flow)


def test_advertisers_best_first(oracle):
    adv = oracle.expected_advertisers(P, "S19")
    assert adv[0] == oracle.expected_route("S19", P).next_hop == "S17"
    assert set(adv) <= set(oracle.topo.configs["S19"].sessions)


def test_own_as_only_scope(oracle):
    # AS1 must not hand AS3 routes to AS5
    assert P not in oracle.expected_rib_out("S0", "S18")
    assert Prefix.parse("10.1.0.0/24") in oracle.expected_rib_out("S0", "S18")


def test_acl_and_nofib_outcomes():
    doc = SMALL.replace("[acl]", "[acl]\nB deny dst=10.2.0.0/24,proto=TCP")
    o = Oracle(load_topology(doc))
    assert o.flow_path(FlowSpec.parse("src=10.1.0.10,dst=10.2.0.10,proto=TCP"))[1] == "acl"
    assert o.flow_path(FlowSpec.parse("src=10.1.0.10,dst=10.2.0.10,proto=UDP"))[1] == "delivered"
    assert o.flow_path(FlowSpec.parse("src=10.1.0.10,dst=10.9.0.10"))[1] == "nofib"


def test_iteration_cap(ref_topo):
    with pytest.raises(OracleError):
        compute_expected_state(load_topology(SMALL), max_iterations=1)


def test_cached_by_content(ref_topo):
    assert compute_expected_state(ref_topo) is compute_expected_state(ref_topo)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_random_paths_loop_free_and_consistent(seed):
    topo = random_topology(seed)
    o = Oracle(topo)
    for a in topo.hosts:
        for b in topo.hosts:
            if a == b:
                continue
            flow = FlowSpec(src=Prefix(topo.host_configs[a].ip, 32),
                            dst=Prefix(topo.host_configs[b].ip, 32))
            path, outcome = o.flow_path(flow)
            # export scopes may cut pairs off, but never into a loop
            assert outcome in ("delivered", "nofib")
            assert len(path) == len(set(path))
            assert o.reachable(a, b) == (outcome == "delivered")
            for x, y in zip(path, path[1:]):
                assert o.should_forward(x, y, flow)
