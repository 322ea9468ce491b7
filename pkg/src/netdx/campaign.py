"""Fault-injection campaigns: pingmesh detection, diagnosis and scoring."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field

from .faults import (
    CAMPAIGN_TYPES, FAULT_CATEGORIES, LINK_TYPES, FaultSpec, FaultType, Injector,
)
from .manager import FailureReport, Manager
from .netmodel import FlowSpec, PolicyAction, PolicyClause, Protocol, load_reference_topology
from .oracle import Oracle, _fingerprint
from .simkernel import Network, rng_stream

log = logging.getLogger(__name__)

PING_INTERVAL_US = 1_000_000
LOSS_THRESHOLD = 3
MAX_PING_ROUNDS = 30
REPORT_WAIT_ROUNDS = 5
MAX_ATTEMPTS = 5
SETTLE_US = 3_000_000


class Pingmesh:
    """All-pairs host pings; a pair is reported after consecutive losses."""

    def __init__(self, net, interval=PING_INTERVAL_US, threshold=LOSS_THRESHOLD):
        self.net = net
        self.interval = interval
        self.threshold = threshold
        hosts = net.topo.hosts
        self.pairs = [(a, b) for a in hosts for b in hosts if a != b]
        self.losses = {p: 0 for p in self.pairs}
        self.rounds = 0
        self._got = set()
        self._seq = 0
        for h in hosts:
            net.hosts[h].listeners.append(self._on_packet)

    def _on_packet(self, host, pkt):
        body = pkt.body
        if pkt.protocol is Protocol.ICMP and isinstance(body, dict) and body.get("echo") == "reply":
            self._got.add(body.get("seq"))

    def reset(self):
        self.losses = {p: 0 for p in self.pairs}

    def round(self) -> list:
        """One ping per pair; returns the pairs that crossed the loss threshold."""
        base = self._seq
        self._seq += len(self.pairs)
        for i, (a, b) in enumerate(self.pairs):
            self.net.ping(a, self.net.topo.host_configs[b].ip, seq=base + i)
        self.net.run_for(self.interval)
        self.rounds += 1
        failed = []
        for i, p in enumerate(self.pairs):
            if base + i in self._got:
                self._got.discard(base + i)
                self.losses[p] = 0
            else:
                self.losses[p] += 1
                if self.losses[p] >= self.threshold:
                    failed.append(p)
        return failed

    def detect(self, max_rounds=MAX_PING_ROUNDS):
        """First failing pair, or None within ``max_rounds`` rounds."""
        self.reset()
        for _ in range(max_rounds):
            failed = self.round()
            if failed:
                return failed[0]
        return None

    def collect(self, max_rounds=MAX_PING_ROUNDS, wait_rounds=REPORT_WAIT_ROUNDS) -> list:
        """Every pair that fails within ``wait_rounds`` rounds of the first failure."""
        self.reset()
        found, deadline = set(), None
        for i in range(max_rounds):
            failed = self.round()
            if failed and deadline is None:
                deadline = i + wait_rounds
            found.update(failed)
            if deadline is not None and i >= deadline:
                break
        return sorted(found)


# --- location selection -----------------------------------------------------

def _host_pairs(topo):
    return [(a, b) for a in topo.hosts for b in topo.hosts if a != b]


def _paths(oracle):
    """Expected switch path for every reachable ordered host pair."""
    out = {}
    for a, b in _host_pairs(oracle.topo):
        p = oracle.expected_path(a, b)
        if p:
            out[(a, b)] = p[0]
    return out


def _breaks(topo, mutate) -> bool:
    """True when ``mutate`` applied to a config copy loses host reachability."""
    t2 = copy.deepcopy(topo)
    mutate(t2)
    try:
        o2 = Oracle(t2)
    except Exception:
        return True
    return any(not o2.reachable(a, b) for a, b in _host_pairs(t2))


def _reject(prefix):
    return PolicyClause(prefix, None, PolicyAction.REJECT)


def _with_clause(policy, clause):
    return dataclasses.replace(policy, clauses=(clause,) + tuple(policy.clauses))


_CANDIDATES = {}


def candidate_locations(topo, ftype: FaultType) -> list:
    """(location, params) choices under which ``ftype`` causes host-visible loss."""
    key = (_fingerprint(topo), ftype)
    if key not in _CANDIDATES:
        _CANDIDATES[key] = _candidate_locations(topo, ftype)
    return _CANDIDATES[key]


def _candidate_locations(topo, ftype):
    oracle = Oracle(topo)
    paths = _paths(oracle)
    transit = {}  # switch -> host pairs it forwards for (not the last hop)
    on_path = set()
    link_use = set()
    for pair, path in paths.items():
        on_path.update(path)
        for s in path[:-1]:
            transit.setdefault(s, set()).add(pair)
        for a, b in zip(path, path[1:]):
            link_use.add(topo.link_between(a, b).link_id)
    subnets = {h: topo.host_configs[h].subnet for h in topo.hosts}
    out = []
    if ftype in (FaultType.SILENT_DROP_IN_SWITCH, FaultType.PAYLOAD_CORRUPTION_IN_SWITCH):
        out = [(s, {}) for s in topo.switches if s in on_path]
    elif ftype is FaultType.INCORRECT_DECREMENT_TTL:
        out = [(s, {}) for s in topo.switches if s in transit]
    elif ftype in LINK_TYPES:
        out = [(l.link_id, {}) for l in topo.links if l.link_id in link_use]
    elif ftype in (FaultType.INCORRECT_FORWARDING_DROP, FaultType.FIB_DISCREPANCY):
        for s in topo.switches:
            for h, net in subnets.items():
                used = any(s in path and b == h for (a, b), path in paths.items())
                entry = oracle.expected_fib(s).get(net)
                if not used or entry is None or entry.source != "bgp":
                    continue
                if ftype is FaultType.FIB_DISCREPANCY:
                    out.append((s, {"prefix": net}))
                else:
                    out.append((s, {"flow": FlowSpec(dst=net)}))
    elif ftype in (FaultType.INGRESS_BGP_MODIFICATION, FaultType.EGRESS_BGP_MODIFICATION):
        for s in topo.switches:
            for peer in topo.configs[s].sessions:
                for h, net in subnets.items():
                    d, a = (s, peer) if ftype is FaultType.INGRESS_BGP_MODIFICATION else (peer, s)
                    best = oracle.expected_route(d, net)
                    # rejecting a non-best route leaves the fixpoint unchanged
                    if best is None or best.next_hop != a:
                        continue

                    def mutate(t, d=d, a=a, net=net):
                        cfg = t.configs[d].sessions[a]
                        t.configs[d].sessions[a] = dataclasses.replace(
                            cfg, policy_in=_with_clause(cfg.policy_in, _reject(net)))
                    if _breaks(topo, mutate):
                        out.append(((s, peer), {"prefix": net}))
    elif ftype is FaultType.BGP_NEIGHBOR_MISSING:
        for s in topo.switches:
            for peer in topo.configs[s].sessions:
                used = any(r.next_hop == y for x, y in ((s, peer), (peer, s))
                           for r in oracle.expected_rib(x).values())
                if not used:
                    continue

                def mutate(t, s=s, peer=peer):
                    del t.configs[s].sessions[peer]
                    del t.configs[peer].sessions[s]
                if _breaks(topo, mutate):
                    out.append(((s, peer), {}))
    return out


# --- runs -------------------------------------------------------------------

@dataclass
class CampaignConfig:
    seed: int = 0
    runs_per_type: int = 10
    types: tuple = CAMPAIGN_TYPES
    topology: object = None
    max_attempts: int = MAX_ATTEMPTS
    max_ping_rounds: int = MAX_PING_ROUNDS


@dataclass
class DiagnosisRecord:
    report: tuple
    verdict: str
    category: str | None
    primitives: int
    runs_to_consensus: int
    used_fault_report: bool
    used_disconnected: bool


@dataclass
class RunRecord:
    index: int
    faults: list
    diagnoses: list = field(default_factory=list)
    correct: bool = False
    category_match: bool = False
    discarded: int = 0
    detected: bool = True
    note: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)


def verdict_matches(verdict, spec: FaultSpec) -> bool:
    kind, elem = spec.faulty_element()
    if kind == "switch":
        return verdict.kind == "FaultySwitch" and verdict.switch == elem
    return verdict.kind == "FaultyLink" and verdict.link == elem


def category_matches(verdict, spec: FaultSpec) -> bool:
    return any(c.value == verdict.category for c in FAULT_CATEGORIES.get(spec.type, ()))


def _spec_dict(spec):
    d = spec.to_dict()
    d["params"] = {k: str(v) for k, v in spec.params.items()}
    return d


class Campaign:
    def __init__(self, config: CampaignConfig | None = None):
        self.config = config or CampaignConfig()
        self.topo = self.config.topology or load_reference_topology()
        self.rng = rng_stream(self.config.seed, "campaign")
        self.pick_rng = rng_stream(self.config.seed, "report-pick")
        self._candidates = {}

    def candidates(self, ftype):
        if ftype not in self._candidates:
            self._candidates[ftype] = candidate_locations(self.topo, ftype)
        return self._candidates[ftype]

    def draw(self, ftype, exclude=()) -> FaultSpec:
        pool = [c for c in self.candidates(ftype) if _key(ftype, c[0]) not in exclude]
        if not pool:
            raise RuntimeError(f"no usable location for {ftype.value}")
        loc, params = pool[int(self.rng.integers(0, len(pool)))]
        return FaultSpec(ftype, loc, dict(params))

    def _network(self, run_seed):
        net = Network(self.topo, seed=run_seed)
        net.converge()
        return net

    def _diagnose(self, net, mesh, oracle):
        pairs = mesh.collect(self.config.max_ping_rounds)
        if not pairs:
            return None, None
        pair = pairs[int(self.pick_rng.integers(0, len(pairs)))]
        d = Manager(net, oracle).diagnose(FailureReport(*pair))
        rec = DiagnosisRecord(pair, str(d.verdict), d.category, d.primitive_count,
                              d.runs_to_consensus, d.used_fault_report, d.used_disconnected)
        return d, rec

    def single_run(self, index, ftype) -> RunRecord:
        oracle = Oracle(self.topo)
        rec = RunRecord(index, [])
        for attempt in range(self.config.max_attempts):
            spec = self.draw(ftype)
            net = self._network(self.config.seed * 100_003 + index * 101 + attempt)
            mesh = Pingmesh(net)
            Injector(net).inject(spec)
            net.run_for(SETTLE_US)
            d, drec = self._diagnose(net, mesh, oracle)
            rec.faults = [_spec_dict(spec)]
            if d is None:
                rec.discarded += 1
                continue
            rec.diagnoses = [dataclasses.asdict(drec)]
            rec.correct = verdict_matches(d.verdict, spec)
            rec.category_match = category_matches(d.verdict, spec)
            return rec
        rec.detected = False
        rec.note = "fault never produced a pingmesh failure"
        return rec

    def double_run(self, index, types) -> RunRecord:
        oracle = Oracle(self.topo)
        rec = RunRecord(index, [])
        for attempt in range(self.config.max_attempts):
            first = self.draw(types[0])
            taken = {_key(first.type, first.location)} | _conflicts(first)
            second = None
            for t in [types[1]] + [t for t in self.config.types if t != types[1]]:
                try:
                    second = self.draw(t, exclude=taken)
                    break
                except RuntimeError:
                    continue
            specs = [first, second]
            net = self._network(self.config.seed * 100_003 + 50_000 + index * 101 + attempt)
            mesh = Pingmesh(net)
            inj = Injector(net)
            handles = [inj.inject(s) for s in specs]
            net.run_for(SETTLE_US)
            rec.faults = [_spec_dict(s) for s in specs]
            d1, r1 = self._diagnose(net, mesh, oracle)
            if d1 is None:
                rec.discarded += 1
                continue
            rec.diagnoses = [dataclasses.asdict(r1)]
            hit = [i for i, s in enumerate(specs) if verdict_matches(d1.verdict, s)]
            if not hit:
                rec.note = "first diagnosis matched neither fault"
                return rec
            inj.revert(handles[hit[0]])
            net.run_for(SETTLE_US)
            rest = specs[1 - hit[0]]
            d2, r2 = self._diagnose(net, mesh, oracle)
            if d2 is None:
                rec.note = "remaining fault not detected after repair"
                return rec
            rec.diagnoses.append(dataclasses.asdict(r2))
            rec.correct = verdict_matches(d2.verdict, rest)
            rec.category_match = category_matches(d1.verdict, specs[hit[0]]) and \
                category_matches(d2.verdict, rest)
            return rec
        rec.detected = False
        rec.note = "faults never produced a pingmesh failure"
        return rec


def _key(ftype, loc):
    return loc[0] if isinstance(loc, tuple) else loc


def _conflicts(spec):
    # a session fault also claims the far end of the session
    if isinstance(spec.location, tuple):
        return {spec.location[1]}
    return set()


@dataclass
class CampaignResult:
    kind: str
    seed: int
    runs: list = field(default_factory=list)

    def correct(self) -> int:
        return sum(r.correct for r in self.runs)

    def by_type(self) -> dict:
        out = {}
        for r in self.runs:
            key = "+".join(f["type"] for f in r.faults)
            row = out.setdefault(key, {"runs": 0, "correct": 0, "category": 0,
                                       "reports": 0, "primitives": 0, "discarded": 0})
            row["runs"] += 1
            row["correct"] += r.correct
            row["category"] += r.category_match
            row["discarded"] += r.discarded
            if r.diagnoses:
                row["reports"] += r.diagnoses[0]["used_fault_report"]
                row["primitives"] += r.diagnoses[0]["primitives"]
        return out

    def mean_primitives(self, which: int) -> float:
        vals = [r.diagnoses[which]["primitives"] for r in self.runs if len(r.diagnoses) > which]
        return sum(vals) / len(vals) if vals else 0.0

    def to_dict(self):
        return {"kind": self.kind, "seed": self.seed, "correct": self.correct(),
                "total": len(self.runs), "by_type": self.by_type(),
                "runs": [r.to_dict() for r in self.runs]}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, default=str)

    def summary(self) -> str:
        lines = [f"{'fault type':<52} {'runs':>4} {'ok':>4} {'cat':>4} {'rep':>4} {'prims':>6}"]
        for key, row in sorted(self.by_type().items()):
            mean = row["primitives"] / row["runs"] if row["runs"] else 0
            lines.append(f"{key:<52} {row['runs']:>4} {row['correct']:>4} {row['category']:>4} "
                         f"{row['reports']:>4} {mean:>6.1f}")
        lines.append(f"total correct: {self.correct()}/{len(self.runs)}")
        if self.kind == "double":
            lines.append(f"mean primitives: first {self.mean_primitives(0):.1f}, "
                         f"second {self.mean_primitives(1):.1f}")
        return "\n".join(lines)


def run_single_campaign(config: CampaignConfig | None = None, progress=None) -> CampaignResult:
    camp = Campaign(config)
    res = CampaignResult("single", camp.config.seed)
    i = 0
    for ftype in camp.config.types:
        for _ in range(camp.config.runs_per_type):
            rec = camp.single_run(i, ftype)
            res.runs.append(rec)
            if progress:
                progress(rec)
            i += 1
    return res


def run_double_campaign(config: CampaignConfig | None = None, runs: int = 100,
                        progress=None) -> CampaignResult:
    camp = Campaign(config)
    res = CampaignResult("double", camp.config.seed)
    types = list(camp.config.types)
    for i in range(runs):
        a, b = (types[int(k)] for k in camp.rng.integers(0, len(types), 2))
        rec = camp.double_run(i, (a, b))
        res.runs.append(rec)
        if progress:
            progress(rec)
    return res
