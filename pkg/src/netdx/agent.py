"""Switch agent: command delegate, fault reporter, checksum reporter, relay,
anomaly detectors.

Management messages travel in-band as MGMT packets whose body is a
length-prefixed JSON document::

    request  {"v": 1, "id": n, "op": "GetFib", "args": {...}}
    reply    {"v": 1, "id": n, "ok": true, "payload": ...}
             {"v": 1, "id": n, "ok": false, "error": "..."}
    report   {"v": 1, "kind": "fault_report" | "checksum" | "anomaly", ...}
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

from .controlplane import DaemonDown, SessionState
from .dataplane import COUNTED_REASONS, WindowNotClosed
from .netmodel import (
    Action, FlowSpec, Packet, Prefix, Protocol, ip_int, ip_str, payload_check,
)

PROTOCOL_VERSION = 1
CHECKSUM_REPORT_CAP = 10
RELAY_TIMEOUT_US = 1_000_000
MARKER_TIMEOUT_US = 100_000
CHURN_WINDOW_US = 1_000_000
CHURN_THRESHOLD = 50
FLAP_THRESHOLD = 3
FIB_CAPACITY = 1000
RESOURCE_FRACTION = 0.9

READ_OPS = frozenset({
    "GetCounters", "GetDropCounters", "GetFib", "GetRib", "GetRibIn", "GetRibOut", "GetAcl",
    "GetHeaderLogs", "GetBgpSessions", "Ping",
})


def encode(doc: dict) -> bytes:
    data = json.dumps(doc, sort_keys=True).encode()
    return struct.pack("!I", len(data)) + data


def decode(blob: bytes) -> dict:
    (n,) = struct.unpack_from("!I", blob)
    data = blob[4:4 + n]
    if len(data) != n:
        raise ValueError("truncated management message")
    return json.loads(data)


def mgmt_packet(src, dst, doc, ident, ttl=64) -> Packet:
    return Packet(0, 0, src, dst, Protocol.MGMT, ttl=ttl, ident=ident,
                  l4_checksum=payload_check(0), body=encode(doc))


@dataclass
class FaultReport:
    switch: str
    ingress_if: int
    reason: str
    arrived: int
    dropped: dict
    time: int
    flow: dict

    def to_dict(self):
        return asdict(self)


@dataclass
class AnomalyReport:
    switch: str
    detector: str
    value: float
    threshold: float
    time: int


class Capture:
    def __init__(self):
        self.records = []

    def record(self, direction, peer, msg, now):
        self.records.append({"dir": direction, "peer": peer, "type": msg.get("type"),
                             "updates": list(msg.get("updates", ())), "time": now})


class SwitchAgent:
    def __init__(self, switch):
        self.sw = switch
        self.net = switch.net
        self.alive = True
        dh = self.net.topo.diagnosis_host
        self.default_manager_ip = self.net.topo.host_configs[dh].ip if dh is not None else None
        self.manager_ip = self.default_manager_ip
        self.checksum_sent = 0
        self.reports_sent = 0
        self.anomalies = []
        self._relays = {}
        self._relay_seq = 0
        self._markers = {}
        self._marker_seq = 0
        self._churn_mark = (0, 0, 0)
        self._flap_base = 0
        self._anomaly_latch = set()

    @property
    def now(self):
        return self.net.kernel.now

    # -- transport --
    def _send(self, dst, doc, src=None, port=None):
        src = src if src is not None else self.sw.cfg.loopback
        pkt = mgmt_packet(src, dst, doc, self.net.next_ident(), ttl=1 if port is not None else 64)
        self.sw.send_from_cpu(pkt, port)

    def _notify(self, doc):
        if self.manager_ip is not None:
            doc = dict(doc, v=PROTOCOL_VERSION)
            self._send(self.manager_ip, doc)

    def on_mgmt(self, pkt, port):
        if not self.alive:
            return
        try:
            doc = decode(pkt.body)
        except (ValueError, struct.error):
            return
        if "op" in doc:
            reply_to = (pkt.src_ip, pkt.dst_ip)
            self.handle_command(doc, lambda r: self._send(reply_to[0], r, src=reply_to[1]))
        elif "ok" in doc and doc.get("id") in self._relays:
            pending = self._relays.pop(doc["id"])
            pending(doc)

    # -- command delegate --
    def handle_command(self, doc, respond):
        rid = doc.get("id")
        op = doc.get("op")
        args = doc.get("args") or {}

        def ok(payload):
            respond({"v": PROTOCOL_VERSION, "id": rid, "ok": True, "payload": payload})

        def err(msg):
            respond({"v": PROTOCOL_VERSION, "id": rid, "ok": False, "error": msg})

        if doc.get("v") != PROTOCOL_VERSION:
            return err(f"unsupported version {doc.get('v')}")
        handler = getattr(self, f"op_{op}", None)
        if handler is None:
            return err(f"unknown op {op!r}")
        try:
            result = handler(args, ok, err)
        except DaemonDown as exc:
            return err(str(exc))
        except (KeyError, ValueError, TypeError) as exc:
            return err(f"{op}: {exc}")
        if result is not None:
            ok(result)

    # reads
    def op_Ping(self, args, ok, err):
        return {"switch": self.sw.node_id}

    def op_GetCounters(self, args, ok, err):
        return self.sw.dp.counters_dict()

    def op_GetDropCounters(self, args, ok, err):
        return self.sw.dp.drop_counters_dict(self.now)

    def op_GetFib(self, args, ok, err):
        return [{"prefix": str(e.prefix), "egress_if": e.egress_if,
                 "next_hop": self.net.peer_of(self.sw.node_id, e.egress_if) if e.egress_if else None,
                 "source": e.source} for e in self.sw.dp.fib.entries()]

    def op_GetRib(self, args, ok, err):
        return self.sw.speaker.rib_dump()

    def op_GetRibIn(self, args, ok, err):
        return self.sw.speaker.rib_in_dump()

    def op_GetRibOut(self, args, ok, err):
        return self.sw.speaker.rib_out_dump()

    def op_GetBgpSessions(self, args, ok, err):
        return self.sw.speaker.sessions_dump()

    def op_GetAcl(self, args, ok, err):
        return [{"action": r.action.value, "flow": str(r.flow)} for r in self.sw.dp.acl]

    def op_GetHeaderLogs(self, args, ok, err):
        return self.sw.dp.header_logs_dict()

    # writes
    def op_SetTraceFilter(self, args, ok, err):
        self.sw.dp.trace_filter = FlowSpec.parse(args["flow"])
        return {"flow": str(self.sw.dp.trace_filter)}

    def op_ClearTraceFilter(self, args, ok, err):
        self.sw.dp.trace_filter = None
        if args.get("stop_flows"):
            self.net.stop_flows(self.sw.node_id)
        return {}

    def op_ResetSuppressFlag(self, args, ok, err):
        self.sw.dp.trigger.suppress = False
        self.checksum_sent = 0
        return {}

    def op_SetSecondaryIp(self, args, ok, err):
        ip = args.get("ip")
        self.sw.set_secondary_ip(ip_int(ip) if ip else None)
        return {}

    def op_SetReportTarget(self, args, ok, err):
        ip = args.get("ip")
        self.manager_ip = ip_int(ip) if ip else self.default_manager_ip
        return {}

    def op_InstallStaticRoute(self, args, ok, err):
        prefix = Prefix.parse(args["prefix"])
        port = self._port_arg(args)
        self.sw.static_routes = [(p, i) for p, i in self.sw.static_routes if p != prefix]
        self.sw.static_routes.append((prefix, port))
        self.sw.refresh_fib()
        return {"prefix": str(prefix), "egress_if": port}

    def op_RemoveStaticRoute(self, args, ok, err):
        prefix = Prefix.parse(args["prefix"])
        self.sw.static_routes = [(p, i) for p, i in self.sw.static_routes if p != prefix]
        self.sw.refresh_fib()
        return {}

    def _port_arg(self, args):
        if "port" in args:
            port = int(args["port"])
        else:
            port = self.net.topo.port_toward(self.sw.node_id, args["next_hop"])
            if port is None:
                raise ValueError(f"{args['next_hop']} is not a neighbor")
        if port not in self.sw.cfg.interfaces:
            raise ValueError(f"no interface {port}")
        return port

    def op_InjectFlow(self, args, ok, err):
        flow = FlowSpec.parse(args["flow"])
        h = self.net.inject_flow(self.sw.node_id, flow, int(args.get("count", 0)),
                                 int(args.get("interval", 2000)), dscp=int(args.get("dscp", 0)),
                                 stream=f"inject:{self.sw.node_id}")
        out = {"count": len(h.packets)}
        if args.get("list_packets"):
            out["packets"] = [[i, str(d)] for i, d in h.packets]
        return out

    # deferred
    def op_RunSwitchDropTest(self, args, ok, err):
        win = self.sw.dp.window
        target = (self.now // win + 1) * win + int(args.get("settle", 1000))

        def check():
            w = self.now // win - 1
            try:
                rep = self.sw.dp.silent_drop_check(w, self.now)
            except WindowNotClosed:
                self.net.kernel.schedule(1000, check, kind="agent")
                return
            ok(rep.to_dict())

        self.net.kernel.schedule(target - self.now, check, kind="agent")

    def op_RunLinkMarkerTest(self, args, ok, err):
        port = self._port_arg(args)
        wait = int(args.get("wait", 200_000))
        results = []

        def fire():
            self._marker_seq += 1
            token = self._marker_seq
            self._markers[token] = got
            self.sw.send_marker(port, token)
            self.net.kernel.schedule(MARKER_TIMEOUT_US, expire, token, kind="agent")

        def got(body):
            results.append(body)
            if len(results) == 1:
                self.net.kernel.schedule(wait, fire, kind="agent")
                return
            a, b = results
            ok({"port": port, "peer": self.net.peer_of(self.sw.node_id, port),
                "first": [a["count_a"], a["count_b"]], "second": [b["count_a"], b["count_b"]],
                "deficit": (b["count_a"] - b["count_b"]) - (a["count_a"] - a["count_b"])})

        def expire(token):
            if self._markers.pop(token, None) is not None:
                err("marker timeout")

        fire()

    def on_marker(self, body):
        cb = self._markers.pop(body.get("token"), None)
        if cb is not None:
            cb(body)

    def op_CaptureControlPackets(self, args, ok, err):
        duration = int(args.get("duration", 1_000_000))
        cap = Capture()
        self.sw.capture = cap
        peer = args.get("refresh_peer")
        if peer is not None:
            self.sw.speaker._require_running()

            def refresh():
                try:
                    self.sw.speaker.soft_refresh(peer)
                except DaemonDown:
                    pass

            self.net.kernel.schedule(int(args.get("refresh_delay", 10_000)), refresh, kind="agent")

        def done():
            if self.sw.capture is cap:
                self.sw.capture = None
            ok(cap.records)

        self.net.kernel.schedule(duration, done, kind="agent")

    def op_Relay(self, args, ok, err):
        target = args["neighbor"]
        port = self.net.topo.port_toward(self.sw.node_id, target)
        if port is None:
            raise ValueError(f"{target} is not a physical neighbor")
        inner = dict(args["inner"])
        self._relay_seq += 1
        rid = f"relay-{self.sw.node_id}-{self._relay_seq}"
        inner["id"] = rid
        inner["v"] = PROTOCOL_VERSION
        self._relays[rid] = lambda reply: ok({"reply": reply})

        def expire():
            if self._relays.pop(rid, None) is not None:
                err(f"relay target {target} unreachable")

        self.net.kernel.schedule(RELAY_TIMEOUT_US, expire, kind="agent")
        self._send(self.net.peer_ip(self.sw.node_id, port), inner,
                   src=self.sw.cfg.interfaces[port].ip, port=port)

    # -- reporters --
    def on_trigger(self, port, pkt):
        if not self.alive:
            return
        dp = self.sw.dp
        dp.trigger.suppress = True
        w = self.now // dp.window
        st = dp.ports[port]
        drops = {r.value: st.drops[r].get(w) or 0 for r in COUNTED_REASONS}
        reason = max(drops, key=lambda k: (drops[k], k))
        rep = FaultReport(self.sw.node_id, port, reason, st.ingress.get(w) or 0, drops,
                          self.now, pkt.header_dict())
        self.reports_sent += 1
        self._notify({"kind": "fault_report", "report": rep.to_dict()})

    def on_mirror(self, pkt, port):
        if not self.alive or self.checksum_sent >= CHECKSUM_REPORT_CAP:
            return
        self.checksum_sent += 1
        self._notify({"kind": "checksum", "switch": self.sw.node_id, "ident": pkt.ident,
                      "digest": str(pkt.payload_digest), "port": port})

    # -- anomaly detectors --
    def tick(self):
        if not self.alive:
            return
        reports = self.anomaly_detectors_tick()
        for r in reports:
            self.anomalies.append(r)
            self._notify({"kind": "anomaly", "report": asdict(r)})

    def anomaly_detectors_tick(self) -> list:
        out = []
        sp = self.sw.speaker
        t0, changes0, flaps0 = self._churn_mark
        flaps = sum(s.flaps for s in sp.sessions.values())
        if self.now - t0 >= CHURN_WINDOW_US:
            churn = sp.rib_changes - changes0
            if churn > CHURN_THRESHOLD:
                out.append(AnomalyReport(self.sw.node_id, "rib_churn", churn, CHURN_THRESHOLD, self.now))
            if flaps - flaps0 > FLAP_THRESHOLD:
                out.append(AnomalyReport(self.sw.node_id, "session_flap", flaps - flaps0,
                                         FLAP_THRESHOLD, self.now))
            self._churn_mark = (self.now, sp.rib_changes, flaps)
        frac = len(self.sw.dp.fib) / FIB_CAPACITY
        if frac >= RESOURCE_FRACTION:
            if "fib" not in self._anomaly_latch:
                self._anomaly_latch.add("fib")
                out.append(AnomalyReport(self.sw.node_id, "fib_capacity", frac, RESOURCE_FRACTION, self.now))
        else:
            self._anomaly_latch.discard("fib")
        return out


def session_established(sessions_payload, peer) -> bool:
    s = sessions_payload.get(peer)
    return s is not None and s["state"] == SessionState.ESTABLISHED.value


__all__ = [
    "SwitchAgent", "FaultReport", "AnomalyReport", "encode", "decode", "mgmt_packet",
    "session_established", "READ_OPS", "CHECKSUM_REPORT_CAP", "Action", "ip_str",
]
