"""Deterministic discrete-event engine and the simulated network.

Time is an integer number of microseconds.  Events run in (time, seq) order.
Periodic timers and keepalives are *background* events: quiescence means no
foreground event is pending.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import zlib
from dataclasses import dataclass

import numpy as np

from .controlplane import TICK_US, BgpSpeaker
from .dataplane import DataPlane, Forward, ToCpu, TriggerConfig, seal, transform_header
from .netmodel import (
    DEFAULT_TTL, FlowSpec, Packet, Prefix, Protocol, payload_check,
)

LINK_LATENCY_US = 50
PROCESSING_DELAY_US = 5
DEFAULT_EVENT_CAP = 5_000_000


class LivelockError(RuntimeError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent counter-based stream keyed by (seed, name)."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class EventStats:
    events: int
    start: int
    end: int
    quiescent: bool


class Kernel:
    def __init__(self, event_cap: int = DEFAULT_EVENT_CAP, record: bool = False):
        self.now = 0
        self._queue = []
        self._seq = 0
        self.foreground = 0
        self.executed = 0
        self.event_cap = event_cap
        self.record = record
        self.log = []
        self._digest = hashlib.sha256()

    def schedule(self, delay: int, fn, *args, background=False, kind="event"):
        if delay < 0:
            raise ValueError("events cannot be scheduled in the past")
        self._seq += 1
        heapq.heappush(self._queue, (self.now + int(delay), self._seq, background, kind, fn, args))
        if not background:
            self.foreground += 1

    def _step(self):
        t, seq, bg, kind, fn, args = heapq.heappop(self._queue)
        if not bg:
            self.foreground -= 1
        self.now = t
        self.executed += 1
        if self.executed > self.event_cap:
            raise LivelockError(f"event cap {self.event_cap} exceeded at t={t}us")
        if self.record:
            rec = {"t": t, "seq": seq, "kind": kind}
            self.log.append(rec)
            self._digest.update(f"{t}:{seq}:{kind};".encode())
        fn(*args)

    def run_until(self, stop: int | None = None, quiescence: bool = False,
                  max_time: int | None = None) -> EventStats:
        """Run to time ``stop``, or until no foreground event is pending."""
        start, n0 = self.now, self.executed
        while self._queue:
            t = self._queue[0][0]
            if quiescence and self.foreground == 0:
                break
            if stop is not None and t > stop:
                break
            if max_time is not None and t > max_time:
                break
            self._step()
        if stop is not None and not quiescence and self.now < stop:
            self.now = stop
        return EventStats(self.executed - n0, start, self.now, self.foreground == 0)

    def run_for(self, duration: int) -> EventStats:
        return self.run_until(self.now + duration)

    def run_while(self, pending, deadline: int) -> bool:
        """Run until ``pending()`` is false or ``deadline``; True if satisfied."""
        while self._queue and pending() and self._queue[0][0] <= deadline:
            self._step()
        if pending():
            self.now = max(self.now, deadline)
            return False
        return True

    def digest(self) -> str:
        return self._digest.hexdigest()

    def export_log(self, path):
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Link:
    def __init__(self, net, link_id, a, b, latency=LINK_LATENCY_US):
        self.net = net
        self.link_id = link_id
        self.ends = (a, b)  # (node, port)
        self.latency = latency
        self.up = True
        self.hooks = []

    def transmit(self, node, pkt: Packet):
        if not self.up:
            return
        for hook in self.hooks:
            pkt = hook.on_transit(self, pkt, node.node_id)
            if pkt is None:
                return
        far, port = self.ends[1] if self.ends[0][0] is node else self.ends[0]
        self.net.kernel.schedule(self.latency, far.receive, pkt, port,
                                 background=pkt.protocol is Protocol.BGP and _is_keepalive(pkt),
                                 kind="deliver")


def _is_keepalive(pkt):
    return isinstance(pkt.body, dict) and pkt.body.get("type") == "KEEPALIVE"


class Host:
    def __init__(self, net, cfg):
        self.net = net
        self.cfg = cfg
        self.node_id = cfg.host_id
        self.ip = cfg.ip
        self.secondary_ip = cfg.secondary_ip
        self.mac = cfg.mac
        self.link = None
        self.gateway_mac = 0
        self.listeners = []
        self.received = 0
        self.corrupted = 0

    def addresses(self):
        return {self.ip} | ({self.secondary_ip} if self.secondary_ip is not None else set())

    def send(self, pkt: Packet):
        pkt.src_mac = self.mac
        pkt.dst_mac = self.gateway_mac
        seal(pkt)
        self.link.transmit(self, pkt)

    def make_packet(self, dst, protocol=Protocol.ICMP, src=None, **kw) -> Packet:
        digest = kw.pop("payload_digest", None)
        if digest is None:
            digest = self.net.next_digest()
        return Packet(0, 0, src if src is not None else self.ip, dst, protocol,
                      ident=kw.pop("ident", None) or self.net.next_ident(),
                      payload_digest=digest, l4_checksum=payload_check(digest), **kw)

    def receive(self, pkt: Packet, port=0):
        if pkt.dst_ip not in self.addresses():
            return
        if pkt.l4_checksum != payload_check(pkt.payload_digest):
            self.corrupted += 1
            return
        self.received += 1
        if pkt.protocol is Protocol.ICMP and isinstance(pkt.body, dict) and pkt.body.get("echo") == "request":
            reply = self.make_packet(pkt.src_ip, Protocol.ICMP, src=pkt.dst_ip,
                                     payload_digest=pkt.payload_digest,
                                     body={"echo": "reply", "seq": pkt.body.get("seq")})
            self.send(reply)
        for fn in list(self.listeners):
            fn(self, pkt)


class Switch:
    def __init__(self, net, cfg, index, trigger: TriggerConfig | None = None):
        self.net = net
        self.cfg = cfg
        self.node_id = cfg.switch_id
        self.index = index
        self.alive = True
        self.processing_delay = PROCESSING_DELAY_US
        self.links = {}  # port -> Link
        self.secondary_ip = None
        local = {cfg.loopback} | {i.ip for i in cfg.interfaces.values()}
        self.dp = DataPlane(sorted(cfg.interfaces), local, trigger)
        self.dp.acl = list(cfg.acl)
        self.static_routes = list(cfg.static_routes)
        self.fib_suppressed = set()
        self.hooks = []  # on_forward / bgp_out_blocked / bgp_in_blocked
        self.capture = None
        self.agent = None
        self.speaker = None

    # -- wiring --
    def neighbor_mac(self, port):
        link = self.links.get(port)
        if link is None:
            return 0
        (na, pa), (nb, pb) = link.ends
        far, fport = (nb, pb) if na is self else (na, pa)
        if isinstance(far, Host):
            return far.mac
        return far.cfg.interfaces[fport].mac

    def refresh_fib(self, _changed=None):
        from .controlplane import build_fib, install_fib
        rib = self.speaker.rib if self.speaker.running else {}
        desired = build_fib(self.cfg, rib, self.neighbor_mac, self.static_routes, self.fib_suppressed)
        install_fib(self.dp.fib, desired)

    def local_addresses(self):
        return self.dp.local_addrs

    def set_secondary_ip(self, ip):
        if self.secondary_ip is not None:
            self.dp.local_addrs.discard(self.secondary_ip)
        self.secondary_ip = ip
        if ip is not None:
            self.dp.local_addrs.add(ip)

    # -- data path --
    def receive(self, pkt: Packet, port: int):
        if not self.alive:
            return
        if pkt.protocol is Protocol.MARKER:
            self._marker_in(pkt, port)
            return
        decision, fired = self.dp.ingress(pkt, port, self.net.kernel.now)
        if fired and self.agent is not None:
            self.agent.on_trigger(port, pkt)
        if isinstance(decision, Forward):
            self._forward(pkt, decision.egress_if)
        elif isinstance(decision, ToCpu):
            self._local(pkt, port)

    def _forward(self, pkt, port):
        entry = self.dp.fib.lookup(pkt.dst_ip)
        nh_mac = entry.next_hop_mac if entry else 0
        out = transform_header(pkt, self.cfg.interfaces[port].mac, nh_mac)
        for hook in self.hooks:
            fn = getattr(hook, "on_forward", None)
            if fn is None:
                continue
            out = fn(self, out)
            if out is None:
                self.dp.discard(pkt)
                return
        self.net.kernel.schedule(self.processing_delay, self._egress, out, port, kind="egress")

    def _egress(self, pkt, port):
        if not self.alive:
            self.dp.discard(pkt)
            return
        mirrored = self.dp.egress(pkt, port, self.net.kernel.now)
        if mirrored and self.agent is not None:
            self.agent.on_mirror(pkt, port)
        link = self.links.get(port)
        if link is not None:
            link.transmit(self, pkt)

    def send_from_cpu(self, pkt: Packet, port: int | None = None, background=False):
        """Transmit a locally generated packet (never traced or counted)."""
        if not self.alive:
            return False
        if port is None:
            entry = self.dp.fib.lookup(pkt.dst_ip)
            if entry is None or entry.egress_if is None:
                return False
            port, nh_mac = entry.egress_if, entry.next_hop_mac
        else:
            nh_mac = self.neighbor_mac(port)
        pkt.src_mac = self.cfg.interfaces[port].mac
        pkt.dst_mac = nh_mac
        seal(pkt)
        link = self.links.get(port)
        if link is None:
            return False
        link.transmit(self, pkt)
        return True

    # -- control traffic --
    def bgp_send(self, peer, msg):
        for hook in self.hooks:
            fn = getattr(hook, "bgp_out_blocked", None)
            if fn is not None and fn(self, peer):
                return
        sess = self.cfg.sessions[peer]
        port = sess.local_if
        if self.capture is not None:
            self.capture.record("out", peer, msg, self.net.kernel.now)
        far_ip = self.net.peer_ip(self.node_id, port)
        pkt = Packet(0, 0, self.cfg.interfaces[port].ip, far_ip, Protocol.BGP, ttl=1,
                     ident=self.net.next_ident(), body=msg)
        self.send_from_cpu(pkt, port)

    def _bgp_in(self, pkt, port):
        peer = self.net.peer_of(self.node_id, port)
        if peer is None or peer not in self.cfg.sessions:
            return
        if self.capture is not None:
            self.capture.record("in", peer, pkt.body, self.net.kernel.now)
        for hook in self.hooks:
            fn = getattr(hook, "bgp_in_blocked", None)
            if fn is not None and fn(self, peer):
                return
        self.speaker.receive(peer, pkt.body, self.net.kernel.now)

    def _local(self, pkt, port):
        if pkt.protocol is Protocol.BGP:
            self._bgp_in(pkt, port)
        elif pkt.protocol is Protocol.MGMT:
            if self.agent is not None:
                self.agent.on_mgmt(pkt, port)
        elif pkt.protocol is Protocol.ICMP and isinstance(pkt.body, dict) and pkt.body.get("echo") == "request":
            reply = Packet(0, 0, pkt.dst_ip, pkt.src_ip, Protocol.ICMP, ttl=DEFAULT_TTL,
                           ident=self.net.next_ident(), payload_digest=pkt.payload_digest,
                           l4_checksum=pkt.l4_checksum, body={"echo": "reply", "seq": pkt.body.get("seq")})
            self.send_from_cpu(reply)

    # -- link markers --
    def send_marker(self, port, token):
        st = self.dp.ports[port]
        body = {"stage": "out", "origin": self.node_id, "port": port,
                "count_a": st.egress.total, "token": token}
        pkt = Packet(0, 0, self.cfg.interfaces[port].ip, self.net.peer_ip(self.node_id, port),
                     Protocol.MARKER, ttl=1, ident=self.net.next_ident(), body=body)
        return self.send_from_cpu(pkt, port)

    def _marker_in(self, pkt, port):
        body = dict(pkt.body)
        if body.get("stage") == "out":
            body["stage"] = "back"
            body["count_b"] = self.dp.ports[port].ingress.total
            body["responder"] = self.node_id
            back = Packet(0, 0, pkt.dst_ip, pkt.src_ip, Protocol.MARKER, ttl=1,
                          ident=self.net.next_ident(), body=body)
            self.send_from_cpu(back, port)
        elif body.get("stage") == "back" and self.agent is not None:
            self.agent.on_marker(body)

    def tick(self):
        if self.alive and self.speaker is not None:
            self.speaker.session_tick(self.net.kernel.now)
            if self.agent is not None:
                self.agent.tick()
        self.net.kernel.schedule(TICK_US, self.tick, background=True, kind="tick")


@dataclass
class FlowHandle:
    switch: str
    packets: list
    stopped: bool = False

    def stop(self):
        self.stopped = True


class Network:
    """Live simulation of a Topology."""

    def __init__(self, topo, seed: int = 0, trigger: TriggerConfig | None = None,
                 event_cap: int = DEFAULT_EVENT_CAP, record: bool = False, agents: bool = True):
        self.topo = topo
        self.seed = seed
        self.kernel = Kernel(event_cap, record)
        self._ident = 0
        self._digest_rng = rng_stream(seed, "payload")
        self._streams = {}
        self.switches = {}
        self.hosts = {}
        self.links = {}
        self._peer = {}  # (switch, port) -> (node_id, far port)
        self.flows = {}
        for i, sid in enumerate(topo.switches):
            tc = TriggerConfig(**trigger.__dict__) if trigger else None
            self.switches[sid] = Switch(self, topo.configs[sid], i, tc)
        for hid in topo.hosts:
            self.hosts[hid] = Host(self, topo.host_configs[hid])
        for l in topo.links:
            a, b = self.switches[l.a[0]], self.switches[l.b[0]]
            link = Link(self, l.link_id, (a, l.a[1]), (b, l.b[1]))
            self.links[l.link_id] = link
            a.links[l.a[1]] = link
            b.links[l.b[1]] = link
            self._peer[(l.a[0], l.a[1])] = (l.b[0], l.b[1])
            self._peer[(l.b[0], l.b[1])] = (l.a[0], l.a[1])
        for hid, host in self.hosts.items():
            hc = host.cfg
            sw = self.switches[hc.switch]
            link = Link(self, f"{hid}-link", (host, 0), (sw, hc.port))
            host.link = link
            host.gateway_mac = sw.cfg.interfaces[hc.port].mac
            sw.links[hc.port] = link
            self._peer[(hc.switch, hc.port)] = (hid, 0)
        rank = {sid: i for i, sid in enumerate(topo.switches)}
        peer_asns = topo.as_assignment
        for sid, sw in self.switches.items():
            sw.speaker = BgpSpeaker(sw.cfg, peer_asns, rank.__getitem__,
                                    send=sw.bgp_send, on_change=sw.refresh_fib)
            sw.refresh_fib()
        if agents:
            from .agent import SwitchAgent
            for sw in self.switches.values():
                sw.agent = SwitchAgent(sw)
        self.started = False

    # -- helpers --
    def rng(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = rng_stream(self.seed, name)
        return self._streams[name]

    def next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFFFF or 1
        return self._ident

    def next_digest(self) -> int:
        return int(self._digest_rng.integers(0, 2**63))

    def peer_of(self, sid, port):
        p = self._peer.get((sid, port))
        return p[0] if p else None

    def peer_ip(self, sid, port):
        node, fport = self._peer[(sid, port)]
        if node in self.hosts:
            return self.hosts[node].ip
        return self.switches[node].cfg.interfaces[fport].ip

    @property
    def now(self):
        return self.kernel.now

    # -- lifecycle --
    def start(self):
        if self.started:
            return
        self.started = True
        for sw in self.switches.values():
            sw.speaker.start(self.kernel.now)
            self.kernel.schedule(TICK_US, sw.tick, background=True, kind="tick")

    def converge(self, max_time: int = 60_000_000) -> EventStats:
        self.start()
        return self.kernel.run_until(quiescence=True, max_time=self.kernel.now + max_time)

    def run_for(self, duration: int) -> EventStats:
        return self.kernel.run_for(duration)

    def run_until(self, stop=None, quiescence=False):
        return self.kernel.run_until(stop, quiescence)

    # -- traffic --
    def host_send(self, host_id, pkt: Packet):
        self.hosts[host_id].send(pkt)

    def ping(self, src_host, dst_ip, seq=0) -> Packet:
        h = self.hosts[src_host]
        pkt = h.make_packet(dst_ip, Protocol.ICMP, body={"echo": "request", "seq": seq})
        h.send(pkt)
        return pkt

    def inject_flow(self, edge_switch, flow: FlowSpec, count: int, interval: int = 2000,
                    port: int | None = None, dscp: int = 0, stream: str = "inject") -> FlowHandle:
        """Emit ``count`` packets matching ``flow`` into ``edge_switch`` ingress.

        The handle lists (ident, payload digest) of every packet; ``stop()``
        cancels the packets not yet emitted.
        """
        handle = FlowHandle(edge_switch, [])
        if count <= 0:
            return handle
        sw = self.switches[edge_switch]
        if flow.dst is None:
            raise ValueError("flow must name a destination")
        src = flow.src.network if flow.src is not None else sw.cfg.loopback
        if flow.src is not None and flow.src.length < 31:
            src = flow.src.network + 10
        dst = flow.dst.network if flow.dst.length >= 31 else flow.dst.network + 10
        proto = flow.protocol or Protocol.UDP
        if proto not in (Protocol.ICMP, Protocol.TCP, Protocol.UDP):
            raise ValueError(f"cannot inject protocol {proto.name}")
        if port is None:
            port = self._ingress_port_for(sw, src)
        rng = self.rng(stream)
        pkts = []
        for _ in range(count):
            digest = int(rng.integers(0, 2**63))
            pkt = Packet(0, sw.cfg.interfaces[port].mac, src, dst, proto,
                         dscp=dscp, ident=self.next_ident(),
                         src_port=flow.src_port if flow.src_port is not None else 40000,
                         dst_port=flow.dst_port if flow.dst_port is not None else 33434,
                         payload_digest=digest, l4_checksum=payload_check(digest))
            seal(pkt)
            pkts.append(pkt)
            handle.packets.append((pkt.ident, digest))
        self.flows.setdefault(edge_switch, []).append(handle)

        def emit(i):
            if handle.stopped:
                return
            sw.receive(pkts[i], port)
            if i + 1 < len(pkts):
                self.kernel.schedule(interval, emit, i + 1, kind="inject")
            else:
                handle.stopped = True

        self.kernel.schedule(0, emit, 0, kind="inject")
        return handle

    def stop_flows(self, edge_switch):
        for h in self.flows.pop(edge_switch, []):
            h.stop()

    def _ingress_port_for(self, sw, src):
        for iface in sw.cfg.interfaces.values():
            if iface.subnet.contains(src):
                return iface.index
        return min(sw.cfg.interfaces)

    # -- views for tests --
    def rib(self, sid) -> dict:
        return dict(self.switches[sid].speaker.rib)

    def fib(self, sid) -> dict:
        return {e.prefix: e for e in self.switches[sid].dp.fib.entries()}

    def loopback_prefix(self, sid) -> Prefix:
        return Prefix.host(self.topo.configs[sid].loopback)
