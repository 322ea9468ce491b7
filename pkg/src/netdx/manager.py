"""Diagnosis manager and script library.

The manager lives on the diagnosis host.  It talks to switch agents over the
simulated network, consults the oracle for expected state, and repeats each
diagnosis until two consecutive runs agree.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from .agent import PROTOCOL_VERSION, decode, mgmt_packet, session_established
from .dataplane import MIRROR_DSCP, DropReason
from .faults import Category
from .netmodel import FlowSpec, Prefix, Protocol, ip_int, ip_str
from .oracle import Oracle, _lpm

log = logging.getLogger(__name__)

COMMAND_TIMEOUT_US = 5_000_000
RETRIES = 1
RUN_DELAY_US = 2_000_000
MAX_RUNS = 5
REPORT_WAIT_US = 1_000_000
REPORT_FLOW_COUNT = 500
SWEEP_FLOW_COUNT = 5000
FLOW_INTERVAL_US = 2000
CAPTURE_US = 1_200_000
PROBES = 10
PROBE_ROUNDS = 3
SECONDARY_POOL = 0x0AFE0000  # 10.254.0.0


class Unreachable(Exception):
    def __init__(self, switch):
        super().__init__(f"switch {switch} unreachable")
        self.switch = switch


class AgentError(Exception):
    pass


@dataclass
class FailureReport:
    src: str
    dst: str
    flow: FlowSpec | None = None
    symptom: str = "Unreachable"


@dataclass(frozen=True)
class Verdict:
    kind: str  # FaultySwitch | FaultyLink | FaultAt | NoFaultFound | ConfigNotFault | Inconclusive
    switch: str | None = None
    link: str | None = None
    neighbor: str | None = None
    category: str | None = None

    def key(self):
        return (self.kind, self.switch, self.link, self.neighbor)

    @property
    def definite(self):
        return self.kind in ("FaultySwitch", "FaultyLink", "FaultAt", "ConfigNotFault")

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def __str__(self):
        if self.kind == "FaultySwitch":
            return f"FaultySwitch({self.switch})"
        if self.kind == "FaultyLink":
            return f"FaultyLink({self.link})"
        if self.kind == "FaultAt":
            return f"FaultAt({self.switch}, {self.neighbor}, {self.link})"
        return self.kind


def faulty_switch(sid, category: Category):
    return Verdict("FaultySwitch", switch=sid, category=category.value)


def faulty_link(lid, category=Category.PACKET_FORWARDING):
    return Verdict("FaultyLink", link=lid, category=category.value)


NO_FAULT = Verdict("NoFaultFound")


@dataclass
class Diagnosis:
    verdict: Verdict
    category: str | None
    evidence: list
    primitive_count: int
    runs_to_consensus: int
    run_verdicts: list
    scripts: list
    oracle_queries: list
    used_fault_report: bool = False
    used_disconnected: bool = False

    def to_dict(self):
        return {
            "verdict": self.verdict.to_dict(),
            "category": self.category,
            "primitive_count": self.primitive_count,
            "runs_to_consensus": self.runs_to_consensus,
            "run_verdicts": [v.to_dict() for v in self.run_verdicts],
            "scripts": self.scripts,
            "used_fault_report": self.used_fault_report,
            "used_disconnected": self.used_disconnected,
            "evidence": self.evidence,
            "oracle_queries": self.oracle_queries,
        }


class Manager:
    def __init__(self, net, oracle: Oracle | None = None, max_runs=MAX_RUNS,
                 run_delay=RUN_DELAY_US, timeout=COMMAND_TIMEOUT_US):
        self.net = net
        self.topo = net.topo
        self.oracle = oracle or Oracle(net.topo)
        self.max_runs = max_runs
        self.run_delay = run_delay
        self.timeout = timeout
        dh = self.topo.diagnosis_host
        self.dh = dh
        self.host = net.hosts[dh]
        hc = self.topo.host_configs[dh]
        self.pip = hc.ip
        self.sip = hc.secondary_ip if hc.secondary_ip is not None else hc.ip
        self.edge = hc.switch
        self._ids = itertools.count(1)
        self._pending = {}
        self.fault_reports = []
        self.checksums = []
        self.anomalies = []
        self.host.listeners.append(self._on_packet)
        self._reset_run_state()
        self.evidence = []
        self.scripts = []
        self.oracle_queries = []

    # -- per-run state -------------------------------------------------------
    def _reset_run_state(self):
        self.route = {}  # switch -> ("sip", ip) | ("relay", neighbor)
        self.route_via = {}
        # (switch, undo op, args, management routes at install time)
        self.undo_log = []
        self.sip_count = 0
        self.visited = set()
        self.run_used_report = False
        self.run_used_disconnected = False
        self.reported_switches = set()
        self.run_index = 0
        self._disconnected_stack = []

    # -- transport -------------------------------------------------------------
    def _on_packet(self, host, pkt):
        if pkt.protocol is not Protocol.MGMT:
            return
        try:
            doc = decode(pkt.body)
        except Exception:
            return
        if "ok" in doc:
            slot = self._pending.get(doc.get("id"))
            if slot is not None and slot.get("reply") is None:
                slot["reply"] = doc
        elif doc.get("kind") == "fault_report":
            self.fault_reports.append(doc["report"])
        elif doc.get("kind") == "checksum":
            self.checksums.append(doc)
        elif doc.get("kind") == "anomaly":
            self.anomalies.append(doc["report"])

    def _target(self, sid):
        mode = self.route.get(sid)
        if mode is None:
            return self.topo.configs[sid].loopback, self.pip, None
        if mode[0] == "sip":
            return mode[1], self.sip, None
        return None, None, mode[1]

    def _send(self, sid, op, args):
        rid = next(self._ids)
        doc = {"v": PROTOCOL_VERSION, "id": rid, "op": op, "args": args}
        dst, src, relay = self._target(sid)
        if relay is not None:
            doc = {"v": PROTOCOL_VERSION, "id": rid, "op": "Relay",
                   "args": {"neighbor": sid, "inner": {"op": op, "args": args}}}
            dst, src, _ = self._target(relay)
        slot = {"reply": None, "relayed": relay is not None}
        self._pending[rid] = slot
        self.host.send(mgmt_packet(src, dst, doc, self.net.next_ident()))
        return rid

    def _log(self, script, sid, op, args, status, summary=""):
        self.evidence.append({"run": self.run_index, "script": script, "op": op, "target": sid,
                              "args": {k: v for k, v in args.items() if k != "inner"},
                              "status": status, "summary": summary})

    def call_many(self, script, calls):
        """Issue commands concurrently; returns one result per call.

        A result is the reply payload, an AgentError, or an Unreachable.
        """
        results = [None] * len(calls)
        todo = list(range(len(calls)))
        for attempt in range(RETRIES + 1):
            rids = {i: self._send(calls[i][0], calls[i][1], calls[i][2]) for i in todo}
            deadline = self.net.now + self.timeout
            self.net.kernel.run_while(
                lambda: any(self._pending[r]["reply"] is None for r in rids.values()), deadline)
            nxt = []
            for i, rid in rids.items():
                slot = self._pending.pop(rid)
                reply = slot["reply"]
                if reply is None:
                    nxt.append(i)
                    continue
                if slot["relayed"]:
                    if not reply.get("ok"):
                        results[i] = Unreachable(calls[i][0])
                        continue
                    reply = reply["payload"]["reply"]
                results[i] = reply["payload"] if reply.get("ok") else AgentError(reply.get("error"))
            todo = nxt
            if not todo:
                break
        for i in todo:
            results[i] = Unreachable(calls[i][0])
        for (sid, op, args), res in zip(calls, results):
            if isinstance(res, Unreachable):
                status, summary = "timeout", "no reply"
            elif isinstance(res, AgentError):
                status, summary = "error", str(res)
            else:
                status, summary = "ok", _summarize(op, res)
            self._log(script, sid, op, args, status, summary)
        return results

    def call(self, script, sid, op, **args):
        res = self.call_many(script, [(sid, op, args)])[0]
        if isinstance(res, Exception):
            raise res
        return res

    def try_call(self, script, sid, op, **args):
        """Like call, but returns the AgentError instead of raising it."""
        res = self.call_many(script, [(sid, op, args)])[0]
        if isinstance(res, Unreachable):
            raise res
        return res

    def query(self, name, *args):
        self.oracle_queries.append({"run": self.run_index, "query": name,
                                    "args": [str(a) for a in args]})
        return getattr(self.oracle, name)(*args)

    def enter(self, script, **ctx):
        self.scripts.append({"run": self.run_index, "script": script,
                             **{k: str(v) for k, v in ctx.items()}})

    def wait(self, duration):
        self.net.kernel.run_for(duration)

    # -- consensus driver ----------------------------------------------------
    def diagnose(self, report: FailureReport) -> Diagnosis:
        self.evidence, self.scripts, self.oracle_queries = [], [], []
        verdicts = []
        used_report = used_disc = False
        for run in range(self.max_runs):
            if run:
                self.wait(self.run_delay)
            self._reset_run_state()
            self.run_index = run
            v = self.run_once(report)
            used_report |= self.run_used_report
            used_disc |= self.run_used_disconnected
            verdicts.append(v)
            if len(verdicts) >= 2 and verdicts[-1].key() == verdicts[-2].key():
                final = verdicts[-1]
                break
        else:
            final = Verdict("Inconclusive",
                            category=" vs ".join(str(v) for v in verdicts[-2:]))
        return Diagnosis(final, final.category, list(self.evidence), len(self.evidence),
                         len(verdicts), verdicts, list(self.scripts), list(self.oracle_queries),
                         used_report, used_disc)

    def run_once(self, report: FailureReport) -> Verdict:
        v = NO_FAULT
        try:
            # a disconnected switch gets a management path, then the run restarts
            for _ in range(3):
                self.visited = set()
                self._reset_reporters()
                self.enter("top_level", src=report.src, dst=report.dst)
                try:
                    v = self._top(report)
                    break
                except Unreachable as exc:
                    v = self.diagnose_disconnected(exc.switch)
                    if v is not None:
                        break
                    v = NO_FAULT
        finally:
            self._cleanup()
        return v

    def _top(self, report):
        directions = [(report.src, report.dst), (report.dst, report.src)]
        for a, b in directions:
            v = self.top_level(a, b, report.flow if (a, b) == directions[0] else None)
            if v is not None:
                return v
        if report.symptom in ("Corruption", "Unreachable", "Intermittent"):
            for a, b in directions:
                v = self.diagnose_corruption(self._host_flow(a, b))
                if v is not None:
                    return v
        return NO_FAULT

    def _reset_reporters(self):
        if self.reported_switches:
            self.call_many("cleanup", [(s, "ResetSuppressFlag", {}) for s in sorted(self.reported_switches)])
            self.reported_switches = set()

    def _cleanup(self):
        self._reset_reporters()
        # undo through the same management path used to install
        for sid, op, args, routes in reversed(self.undo_log):
            self.route = dict(routes)
            self.call_many("cleanup", [(sid, op, args)])
        self.route = {}
        self.undo_log = []

    # -- helpers -----------------------------------------------------------------
    def _addr(self, node):
        if node in self.topo.host_configs:
            return self.topo.host_configs[node].ip
        if node in self.topo.configs:
            return self.topo.configs[node].loopback
        return ip_int(node)

    def _host_flow(self, a, b):
        return FlowSpec(src=Prefix(self._addr(a), 32), dst=Prefix(self._addr(b), 32),
                        protocol=Protocol.UDP)

    def _peer(self, sid, port):
        iface = self.topo.configs[sid].interfaces.get(int(port))
        return iface.peer[0] if iface is not None and iface.peer else None

    def _link_id(self, a, b):
        link = self.topo.link_between(a, b)
        return link.link_id if link is not None else f"{a}-{b}"

    def _guard(self, *key):
        if key in self.visited:
            return True
        self.visited.add(key)
        return False

    def _match_report(self, start, flow):
        for rep in self.fault_reports[start:]:
            # source bits may be the corrupted field, so match on destination
            if flow.dst.contains(ip_int(rep["flow"]["dst_ip"])):
                return rep
        return None

    @staticmethod
    def _fib_lookup(entries, dst):
        best = None
        for e in entries:
            p = Prefix.parse(e["prefix"])
            if p.contains(dst) and (best is None or p.length > best[0].length):
                best = (p, e)
        return best[1] if best else None

    # -- top level -------------------------------------------------------------
    def top_level(self, a, b, flow=None):
        if a not in self.topo.host_configs:
            return None
        flow = flow or self._host_flow(a, b)
        path, outcome = self.query("flow_path", flow)
        if outcome not in ("delivered", "local"):
            return Verdict("ConfigNotFault", category=outcome)
        edge = path[0]
        start = len(self.fault_reports)
        self.call("top_level", edge, "SetTraceFilter", flow=str(flow))
        self.call("top_level", edge, "InjectFlow", flow=str(flow), count=REPORT_FLOW_COUNT,
                  interval=FLOW_INTERVAL_US)
        self.net.kernel.run_while(lambda: self._match_report(start, flow) is None,
                                  self.net.now + REPORT_WAIT_US)
        rep = self._match_report(start, flow)
        self.call("top_level", edge, "ClearTraceFilter", stop_flows=True)
        if rep is None:
            return self.sweep(flow, path)
        self.run_used_report = True
        self.reported_switches.add(rep["switch"])
        x, port, reason = rep["switch"], rep["ingress_if"], rep["reason"]
        self.enter("fault_report", switch=x, reason=reason)
        if reason == DropReason.NO_FIB.value:
            return self.no_forwarding(x, flow)
        if reason == DropReason.ZERO_TTL.value:
            return self.ttl_script(x, port)
        if reason == DropReason.BAD_CHECKSUM.value:
            return self.header_corruption(x, port)
        if reason == DropReason.ACL_DENY.value:
            # the oracle expects delivery, so the deny is not configured behavior
            return faulty_switch(x, Category.PACKET_FORWARDING)
        return None

    def ttl_script(self, r, port):
        self.enter("ttl", switch=r)
        u = self._peer(r, port)
        if u is None or u not in self.topo.configs:
            return None
        logs = self.call("ttl", u, "GetHeaderLogs")
        toward = str(self.topo.port_toward(u, r))
        ingress = {e["ident"]: e["ttl"] for st in logs.values() for e in st["ingress"]}
        egress = {e["ident"]: e["ttl"] for e in logs.get(toward, {}).get("egress", [])}
        deltas = {ingress[i] - egress[i] for i in egress if i in ingress}
        if not deltas:
            return None
        if deltas != {1}:
            return faulty_switch(u, Category.PACKET_TRANSFORMATION)
        return faulty_link(self._link_id(u, r), Category.PACKET_TRANSFORMATION)

    def header_corruption(self, r, port):
        self.enter("header_corruption", switch=r)
        u = self._peer(r, port)
        if u is None or u not in self.topo.configs:
            return faulty_link(self._link_id(u, r), Category.PACKET_TRANSFORMATION)
        logs = self.call("header_corruption", u, "GetHeaderLogs")
        toward = str(self.topo.port_toward(u, r))
        sent = logs.get(toward, {}).get("egress", [])
        if any(not e["checksum_ok"] for e in sent):
            return faulty_switch(u, Category.PACKET_TRANSFORMATION)
        return faulty_link(self._link_id(u, r), Category.PACKET_TRANSFORMATION)

    def actual_path(self, script, edge, dst):
        """Switches visited by ``dst`` traffic according to the live FIBs."""
        hops, cur = [], edge
        while cur is not None and cur not in hops and len(hops) <= len(self.topo.switches):
            hops.append(cur)
            e = self._fib_lookup(self.call(script, cur, "GetFib"), dst)
            if e is None or e["next_hop"] not in self.topo.configs:
                break
            cur = e["next_hop"]
        return hops

    def sweep(self, flow, path):
        """Silent-drop localization with a long traced flow on the path."""
        self.enter("sweep", flow=flow)
        edge = path[0]
        self.call("sweep", edge, "SetTraceFilter", flow=str(flow))
        self.call("sweep", edge, "InjectFlow", flow=str(flow), count=SWEEP_FLOW_COUNT,
                  interval=FLOW_INTERVAL_US)
        try:
            hops = self.actual_path("sweep", edge, flow.dst.network)
            calls = [(s, "RunSwitchDropTest", {}) for s in hops]
            calls += [(a, "RunLinkMarkerTest", {"next_hop": b}) for a, b in zip(hops, hops[1:])]
            res = self.call_many("sweep", calls)
        finally:
            self.call("sweep", edge, "ClearTraceFilter", stop_flows=True)
        n = len(hops)
        for i, s in enumerate(hops):
            r = res[i]
            if isinstance(r, Unreachable):
                raise r
            if isinstance(r, dict) and r["deficit"] > 0:
                return faulty_switch(s, Category.PACKET_FORWARDING)
            if i + 1 < n:
                r = res[n + i]
                if isinstance(r, dict) and r["deficit"] > 0:
                    return faulty_link(self._link_id(s, hops[i + 1]))
        return None

    def diagnose_corruption(self, flow):
        """Payload corruption probe with mirrored packets."""
        path, outcome = self.query("flow_path", flow)
        if outcome not in ("delivered", "local"):
            return None
        self.enter("payload_probe", flow=flow)
        edge = path[0]
        for _ in range(PROBE_ROUNDS):
            self.call_many("payload_probe", [(s, "ResetSuppressFlag", {}) for s in path])
            start = len(self.checksums)
            res = self.call("payload_probe", edge, "InjectFlow", flow=str(flow), count=PROBES,
                            interval=FLOW_INTERVAL_US, dscp=MIRROR_DSCP, list_packets=True)
            sent = {i: d for i, d in res["packets"]}
            self.wait(PROBES * FLOW_INTERVAL_US + 50_000)
            seen = self.checksums[start:]
            for s in path:
                if any(c["switch"] == s and c["ident"] in sent and c["digest"] != sent[c["ident"]]
                       for c in seen):
                    return faulty_switch(s, Category.PACKET_TRANSFORMATION)
        return None

    # -- control-plane scripts -------------------------------------------------
    def no_forwarding(self, x, flow):
        self.enter("no_forwarding", switch=x)
        dst = flow.dst.network
        expected = _lpm(self.query("expected_fib", x), dst)
        actual = self._fib_lookup(self.call("no_forwarding", x, "GetFib"), dst)
        if actual is not None:
            # a matching entry exists yet the packet was dropped
            return faulty_switch(x, Category.PACKET_FORWARDING)
        if expected is None or expected.source != "bgp":
            return faulty_switch(x, Category.DATAPLANE_TABLE_GENERATION)
        return self.route_analysis(x, expected.prefix, in_fib=True)

    def route_analysis(self, x, prefix, in_fib=False):
        if self._guard("route_analysis", x, prefix):
            return None
        self.enter("route_analysis", switch=x, prefix=prefix)
        p = str(prefix)
        rib = self.try_call("route_analysis", x, "GetRib")
        if isinstance(rib, AgentError):
            return faulty_switch(x, Category.EXTERNAL_INTERACTION)
        if any(e["prefix"] == p for e in rib):
            # present in the RIB: missing only from the forwarding table
            return faulty_switch(x, Category.DATAPLANE_TABLE_GENERATION) if in_fib else None
        if prefix in self.topo.configs[x].originated:
            return faulty_switch(x, Category.ROUTE_TABLE_GENERATION)
        rib_in = self.call("route_analysis", x, "GetRibIn")
        expected_in = self.query("expected_advertisers", prefix, x)
        for peer in expected_in:
            if any(e["prefix"] == p for e in rib_in.get(peer, [])):
                return faulty_switch(x, Category.ROUTE_TABLE_GENERATION)
        for a in expected_in:
            v = self.route_adv_missing(a, prefix, x)
            if v is not None:
                return v
        return None

    def route_adv_missing(self, a, prefix, d):
        """``a`` is expected to advertise ``prefix`` to ``d`` but ``d`` lacks it."""
        if self._guard("route_adv_missing", a, prefix, d):
            return None
        self.enter("route_adv_missing", advertiser=a, prefix=prefix, receiver=d)
        p = str(prefix)
        sessions = self.call("route_adv_missing", d, "GetBgpSessions")
        if not session_established(sessions, a):
            return self.neighbor_down(d, a)
        rib = self.try_call("route_adv_missing", a, "GetRib")
        if isinstance(rib, AgentError):
            return faulty_switch(a, Category.EXTERNAL_INTERACTION)
        if not any(e["prefix"] == p for e in rib):
            return self.route_analysis(a, prefix)
        rib_out = self.call("route_adv_missing", a, "GetRibOut")
        if not any(e["prefix"] == p for e in rib_out.get(d, [])):
            return faulty_switch(a, Category.ROUTE_ADV_GENERATION)
        cap_a, cap_d = self._capture("route_adv_missing", a, d, refresh=True)
        sent = [u for r in cap_a if r["dir"] == "out" and r["peer"] == d for u in r["updates"]]
        got = [u for r in cap_d if r["dir"] == "in" and r["peer"] == a for u in r["updates"]]
        if not any(u["kind"] == "announce" and u["prefix"] == p for u in sent):
            return faulty_switch(a, Category.ROUTE_ADV_GENERATION)
        if not any(u["kind"] == "announce" and u["prefix"] == p for u in got):
            return self.neighbor_down(d, a)
        rib_in = self.call("route_adv_missing", d, "GetRibIn")
        if not any(e["prefix"] == p for e in rib_in.get(a, [])):
            return faulty_switch(d, Category.ROUTE_ADV_RECEPTION)
        return faulty_switch(d, Category.ROUTE_TABLE_GENERATION)

    def _capture(self, script, a, b, refresh=False):
        """Concurrent control-packet capture at both ends of a session."""
        args_a = {"duration": CAPTURE_US}
        if refresh:
            args_a["refresh_peer"] = b
        res = self.call_many(script, [(a, "CaptureControlPackets", args_a),
                                      (b, "CaptureControlPackets", {"duration": CAPTURE_US})])
        for r in res:
            if isinstance(r, Unreachable):
                raise r
        return [r if isinstance(r, list) else [] for r in res]

    def neighbor_down(self, a, b):
        """The session between ``a`` and ``b`` is not established."""
        if self._guard("neighbor_down", a, b, self.route.get(b)):
            return None
        self.enter("neighbor_down", switch=a, neighbor=b)
        res = self.try_call("neighbor_down", b, "GetBgpSessions")
        if isinstance(res, AgentError):
            # agent answers but the routing process does not
            return faulty_switch(b, Category.EXTERNAL_INTERACTION)
        caps = dict(zip((a, b), self._capture("neighbor_down", a, b)))
        other = {a: b, b: a}
        sent = {s: any(r["dir"] == "out" and r["peer"] == other[s] for r in caps[s]) for s in caps}
        recv = {s: any(r["dir"] == "in" and r["peer"] == other[s] for r in caps[s]) for s in caps}
        for s in (b, a):
            if recv[s] and not sent[s]:
                return faulty_switch(s, Category.EXTERNAL_INTERACTION)
        for s in (a, b):
            if sent[s] and not recv[other[s]]:
                return faulty_link(self._link_id(a, b), Category.EXTERNAL_INTERACTION)
        return None

    # -- reachability repair -----------------------------------------------------
    def _mgmt_path(self, target):
        paths = self.query("expected_path", self.dh, target)
        if paths:
            return paths[0]
        # physical shortest path when routing offers none
        start = self.edge
        prev, frontier = {start: None}, [start]
        while frontier and target not in prev:
            nxt = []
            for s in frontier:
                for n in self.topo.neighbors(s):
                    if n not in prev:
                        prev[n] = s
                        nxt.append(n)
            frontier = nxt
        if target not in prev:
            return []
        out = [target]
        while prev[out[-1]] is not None:
            out.append(prev[out[-1]])
        return out[::-1]

    def diagnose_disconnected(self, target):
        """Locate where management reachability breaks and route around it.

        Returns a verdict, or None once a secondary path to the unreachable
        switch is installed and the run can be repeated.
        """
        self.run_used_disconnected = True
        self.enter("disconnected", switch=target)
        if target in self.route and self.route[target][0] == "sip":
            return Verdict("FaultAt", switch=target, neighbor=self.route_via.get(target),
                           link=self._link_id(target, self.route_via.get(target)),
                           category=Category.EXTERNAL_INTERACTION.value)
        path = self._mgmt_path(target)
        if not path:
            return Verdict("FaultAt", switch=target, category=Category.EXTERNAL_INTERACTION.value)
        res = self.call_many("disconnected", [(s, "Ping", {}) for s in path])
        bad = [s for s, r in zip(path, res) if isinstance(r, Unreachable)]
        if not bad:
            return None
        u = bad[0]
        i = path.index(u)
        if i == 0:
            return Verdict("FaultAt", switch=u, link=self._link_id(u, self.dh),
                           category=Category.EXTERNAL_INTERACTION.value)
        n = path[i - 1]
        relay = ("relay", n)
        self.route[u] = relay
        res = self.call_many("disconnected", [(u, "Ping", {})])[0]
        if isinstance(res, Unreachable):
            self.route.pop(u, None)
            return Verdict("FaultAt", switch=u, neighbor=n, link=self._link_id(u, n),
                           category=Category.EXTERNAL_INTERACTION.value)
        v = self._route_home(u)
        if v is not None:
            return v
        self.sip_count += 1
        sip_u = ip_str(SECONDARY_POOL + self.sip_count)
        self.call("disconnected", u, "SetSecondaryIp", ip=sip_u)
        self.undo_log.append((u, "SetSecondaryIp", {"ip": None}, dict(self.route)))
        back = Prefix(self.sip, 32)
        self.call("disconnected", u, "InstallStaticRoute", prefix=str(back), next_hop=n)
        self.undo_log.append((u, "RemoveStaticRoute", {"prefix": str(back)}, dict(self.route)))
        # reports to the primary address would follow the broken route
        self.call("disconnected", u, "SetReportTarget", ip=ip_str(self.sip))
        self.undo_log.append((u, "SetReportTarget", {"ip": None}, dict(self.route)))
        fwd = Prefix(ip_int(sip_u), 32)
        self.route.pop(u)
        for s, nxt in zip(path[:i], path[1:i + 1]):
            self.call("disconnected", s, "InstallStaticRoute", prefix=str(fwd), next_hop=nxt)
            self.undo_log.append((s, "RemoveStaticRoute", {"prefix": str(fwd)}, dict(self.route)))
        self.route[u] = ("sip", ip_int(sip_u))
        self.route_via[u] = n
        return None

    def _route_home(self, u):
        """Verdict if ``u`` itself lacks the expected route back to the diagnosis host."""
        home = self.topo.host_configs[self.dh].ip
        expected = _lpm(self.query("expected_fib", u), home)
        if expected is None:
            return None
        actual = self._fib_lookup(self.call("disconnected", u, "GetFib"), home)
        if actual is not None and actual["egress_if"] == expected.egress_if:
            return None
        if actual is not None or expected.source != "bgp":
            return faulty_switch(u, Category.DATAPLANE_TABLE_GENERATION)
        return self.route_analysis(u, expected.prefix, in_fib=True)

def _summarize(op, payload):
    if isinstance(payload, list):
        return f"{len(payload)} entries"
    if isinstance(payload, dict):
        keys = ("deficit", "count", "state", "switch")
        parts = [f"{k}={payload[k]}" for k in keys if k in payload]
        return ", ".join(parts) or f"{len(payload)} fields"
    return str(payload)
