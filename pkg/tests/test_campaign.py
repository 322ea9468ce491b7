import json

import pytest

from netdx.campaign import (
    CampaignConfig, Pingmesh, candidate_locations, run_double_campaign, run_single_campaign,
    verdict_matches,
)
from netdx.faults import CAMPAIGN_TYPES, FaultSpec, FaultType, Injector
from netdx.manager import Verdict


def test_verdict_scoring():
    spec = FaultSpec(FaultType.BGP_NEIGHBOR_MISSING, ("S10", "S17"))
    assert verdict_matches(Verdict("FaultySwitch", switch="S10"), spec)
    assert not verdict_matches(Verdict("FaultySwitch", switch="S17"), spec)
    link = FaultSpec(FaultType.SILENT_DROP_ON_LINK, "L4")
    assert verdict_matches(Verdict("FaultyLink", link="L4"), link)
    # a partial localization is not a correct diagnosis
    assert not verdict_matches(Verdict("FaultAt", switch="S4", link="L4"), link)


@pytest.mark.parametrize("ftype", CAMPAIGN_TYPES, ids=lambda t: t.value)
def test_candidates_exist(ref_topo, ftype):
    assert candidate_locations(ref_topo, ftype)


def test_pingmesh_detects_blackhole(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.SILENT_DROP_IN_SWITCH, "S10", {"p": 1.0}))
    mesh = Pingmesh(ref_net)
    pair = mesh.detect(10)
    assert pair is not None and mesh.rounds == 3


def test_pingmesh_collects_all_failing_pairs(ref_net):
    Injector(ref_net).inject(FaultSpec(FaultType.SILENT_DROP_IN_SWITCH, "S17", {"p": 1.0}))
    mesh = Pingmesh(ref_net)
    pairs = mesh.collect(max_rounds=10, wait_rounds=2)
    assert ("H7", "H3") in pairs and ("H3", "H7") in pairs
    assert mesh.rounds == 5
    assert all(a != b for a, b in pairs)


def test_pingmesh_quiet_network(ref_net):
    mesh = Pingmesh(ref_net)
    assert mesh.collect(max_rounds=4) == [] and mesh.rounds == 4


def test_small_single_campaign(tmp_path, ref_topo):
    cfg = CampaignConfig(seed=5, runs_per_type=1, topology=ref_topo,
                         types=(FaultType.INCORRECT_DECREMENT_TTL, FaultType.SILENT_DROP_ON_LINK))
    res = run_single_campaign(cfg)
    assert res.correct() == 2
    out = tmp_path / "single.json"
    res.write_json(out)
    doc = json.loads(out.read_text())
    assert doc["total"] == 2 and doc["runs"][0]["faults"][0]["type"] == "IncorrectDecrementTTL"
    assert "total correct: 2/2" in res.summary()


def test_small_double_campaign(ref_topo):
    cfg = CampaignConfig(seed=9, topology=ref_topo,
                         types=(FaultType.CORRUPTION_ON_LINK_IP, FaultType.FIB_DISCREPANCY))
    res = run_double_campaign(cfg, runs=2)
    assert res.correct() == 2
    assert all(len(r.diagnoses) == 2 for r in res.runs)
    assert res.mean_primitives(0) > 0 and res.mean_primitives(1) > 0
