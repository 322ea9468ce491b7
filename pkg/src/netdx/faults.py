"""Invertible fault injection.

Stochastic hooks affect only data traffic (ICMP/TCP/UDP); routing and
management messages ride a reliable transport in the model and markers are
generated by the agents themselves.
"""
from __future__ import annotations

import enum
import itertools
import json
import zlib
from dataclasses import dataclass, field, replace

from .dataplane import DropReason, seal
from .netmodel import DATA_PROTOCOLS, FlowSpec, Prefix


class FaultType(enum.Enum):
    SILENT_DROP_IN_SWITCH = "SilentDropInSwitch"
    SILENT_DROP_ON_LINK = "SilentDropOnLink"
    CORRUPTION_ON_LINK_IP = "CorruptionOnLinkIP"
    INCORRECT_DECREMENT_TTL = "IncorrectDecrementTTL"
    PAYLOAD_CORRUPTION_IN_SWITCH = "PacketPayloadCorruptionInSwitch"
    INCORRECT_FORWARDING_DROP = "IncorrectForwardingDrop"
    FIB_DISCREPANCY = "FIBDiscrepancy"
    INGRESS_BGP_MODIFICATION = "IngressBgpUpdateModification"
    BGP_NEIGHBOR_MISSING = "BgpNeighborMissing"
    EGRESS_BGP_MODIFICATION = "EgressBgpUpdateModification"
    # outside the campaign set
    ROUTING_DAEMON_CRASH = "RoutingDaemonCrash"
    LINK_DOWN = "LinkDown"
    AGENT_CRASH = "AgentCrash"
    SWITCH_CRASH = "SwitchCrash"
    ROUTE_OSCILLATION = "RouteOscillation"


CAMPAIGN_TYPES = (
    FaultType.SILENT_DROP_IN_SWITCH, FaultType.SILENT_DROP_ON_LINK, FaultType.CORRUPTION_ON_LINK_IP,
    FaultType.INCORRECT_DECREMENT_TTL, FaultType.PAYLOAD_CORRUPTION_IN_SWITCH,
    FaultType.INCORRECT_FORWARDING_DROP, FaultType.FIB_DISCREPANCY,
    FaultType.INGRESS_BGP_MODIFICATION, FaultType.BGP_NEIGHBOR_MISSING,
    FaultType.EGRESS_BGP_MODIFICATION,
)


class Category(enum.Enum):
    PACKET_FORWARDING = "packet-forwarding"
    PACKET_TRANSFORMATION = "packet-transformation"
    DATAPLANE_TABLE_GENERATION = "dataplane-table-generation"
    ROUTE_TABLE_GENERATION = "route-table-generation"
    ROUTE_ADV_RECEPTION = "route-adv-reception"
    ROUTE_ADV_GENERATION = "route-adv-generation"
    EXTERNAL_INTERACTION = "external-interaction"


FAULT_CATEGORIES = {
    FaultType.SILENT_DROP_IN_SWITCH: (Category.PACKET_FORWARDING,),
    FaultType.SILENT_DROP_ON_LINK: (Category.PACKET_FORWARDING,),
    FaultType.INCORRECT_FORWARDING_DROP: (Category.PACKET_FORWARDING,),
    FaultType.CORRUPTION_ON_LINK_IP: (Category.PACKET_TRANSFORMATION,),
    FaultType.INCORRECT_DECREMENT_TTL: (Category.PACKET_TRANSFORMATION,),
    FaultType.PAYLOAD_CORRUPTION_IN_SWITCH: (Category.PACKET_TRANSFORMATION,),
    FaultType.FIB_DISCREPANCY: (Category.DATAPLANE_TABLE_GENERATION,),
    FaultType.INGRESS_BGP_MODIFICATION: (Category.ROUTE_TABLE_GENERATION, Category.ROUTE_ADV_RECEPTION),
    FaultType.EGRESS_BGP_MODIFICATION: (Category.ROUTE_ADV_GENERATION,),
    FaultType.BGP_NEIGHBOR_MISSING: (Category.EXTERNAL_INTERACTION,),
}

SWITCH_TYPES = {
    FaultType.SILENT_DROP_IN_SWITCH, FaultType.INCORRECT_DECREMENT_TTL,
    FaultType.PAYLOAD_CORRUPTION_IN_SWITCH, FaultType.INCORRECT_FORWARDING_DROP,
    FaultType.FIB_DISCREPANCY, FaultType.ROUTING_DAEMON_CRASH, FaultType.AGENT_CRASH,
    FaultType.SWITCH_CRASH, FaultType.ROUTE_OSCILLATION,
}
LINK_TYPES = {FaultType.SILENT_DROP_ON_LINK, FaultType.CORRUPTION_ON_LINK_IP, FaultType.LINK_DOWN}
SESSION_TYPES = {FaultType.INGRESS_BGP_MODIFICATION, FaultType.EGRESS_BGP_MODIFICATION,
                 FaultType.BGP_NEIGHBOR_MISSING}

DEFAULT_PROBABILITY = 0.3
# drives the outgoing TTL to zero (clamped); see IncorrectDecrementTTL
DEFAULT_TTL_DELTA = 255
OSCILLATION_PERIOD_US = 50_000


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    type: FaultType
    location: object  # switch id | link id | (switch id, peer id)
    params: dict = field(default_factory=dict, hash=False, compare=False)
    stream: str | None = None

    def faulty_element(self):
        """The switch or link a correct diagnosis must name."""
        if self.type in SESSION_TYPES:
            return ("switch", self.location[0])
        if self.type in LINK_TYPES:
            return ("link", self.location)
        return ("switch", self.location)

    def location_key(self):
        return self.location[0] if self.type in SESSION_TYPES else self.location

    def to_dict(self) -> dict:
        loc = list(self.location) if isinstance(self.location, tuple) else self.location
        return {"type": self.type.value, "location": loc,
                "params": {k: str(v) for k, v in sorted(self.params.items())},
                "stream": self.stream_name()}

    @classmethod
    def from_dict(cls, d) -> FaultSpec:
        ftype = FaultType(d["type"])
        loc = d["location"]
        if isinstance(loc, list):
            loc = tuple(loc)
        params = dict(d.get("params", {}))
        for k in ("p", "ttl_delta"):
            if k in params:
                params[k] = float(params[k]) if k == "p" else int(params[k])
        for k in ("prefix", "rewrite_to"):
            if k in params and isinstance(params[k], str):
                params[k] = Prefix.parse(params[k])
        if "flow" in params and isinstance(params["flow"], str):
            params["flow"] = FlowSpec.parse(params["flow"])
        return cls(ftype, loc, params, d.get("stream"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def stream_name(self) -> str:
        return self.stream or f"fault:{self.type.value}:{self.location}"


@dataclass
class FaultHandle:
    hid: int
    spec: FaultSpec
    active: bool = True
    _undo: object = None


def bogus_prefix(location) -> Prefix:
    k = zlib.crc32(repr(location).encode()) & 0x3FF
    return Prefix((198 << 24) | (18 << 16) | ((k & 0xFF) << 8), 24) if k < 256 else \
        Prefix((198 << 24) | (19 << 16) | ((k & 0xFF) << 8), 24)


# --- hook objects ---------------------------------------------------------

class _SwitchDrop:
    def __init__(self, rng, p):
        self.rng, self.p = rng, p

    def on_forward(self, sw, pkt):
        if pkt.protocol in DATA_PROTOCOLS and self.rng.random() < self.p:
            return None
        return pkt


class _LinkDrop:
    def __init__(self, rng, p):
        self.rng, self.p = rng, p

    def on_transit(self, link, pkt, sender):
        if pkt.protocol in DATA_PROTOCOLS and self.rng.random() < self.p:
            return None
        return pkt


class _LinkCorrupt:
    def __init__(self, rng, p):
        self.rng, self.p = rng, p

    def on_transit(self, link, pkt, sender):
        if pkt.protocol in DATA_PROTOCOLS and self.rng.random() < self.p:
            bit = int(self.rng.integers(0, 32))
            return pkt.copy(src_ip=pkt.src_ip ^ (1 << bit))
        return pkt


class _TtlDecrement:
    def __init__(self, delta):
        self.delta = delta

    def on_forward(self, sw, pkt):
        if pkt.protocol not in DATA_PROTOCOLS:
            return pkt
        # pkt.ttl already carries the correct -1
        pkt.ttl = max(pkt.ttl + 1 - self.delta, 0)
        return seal(pkt)


class _PayloadCorrupt:
    def __init__(self, rng, p):
        self.rng, self.p = rng, p

    def on_forward(self, sw, pkt):
        if pkt.protocol in DATA_PROTOCOLS and self.rng.random() < self.p:
            pkt.payload_digest ^= 1 << int(self.rng.integers(0, 64))
        return pkt


class _ForcedDrop:
    def __init__(self, flow):
        self.flow = flow

    def forced_drop(self, pkt):
        if pkt.protocol in DATA_PROTOCOLS and self.flow.matches(pkt):
            return DropReason.NO_FIB
        return None


class _BgpBlock:
    def __init__(self, peer):
        self.peer = peer

    def bgp_out_blocked(self, sw, peer):
        return peer == self.peer

    def bgp_in_blocked(self, sw, peer):
        return peer == self.peer


# --- injector -------------------------------------------------------------

class Injector:
    def __init__(self, net):
        self.net = net
        self._ids = itertools.count(1)
        self.active = {}

    def validate(self, spec: FaultSpec):
        t, loc = spec.type, spec.location
        topo = self.net.topo
        if t in SESSION_TYPES:
            if not (isinstance(loc, tuple) and len(loc) == 2 and loc[0] in topo.configs
                    and loc[1] in topo.configs[loc[0]].sessions):
                raise FaultError(f"{t.value} needs a (switch, peer) session location, got {loc!r}")
        elif t in LINK_TYPES:
            if loc not in self.net.links:
                raise FaultError(f"{t.value} needs a link location, got {loc!r}")
        elif loc not in topo.configs:
            raise FaultError(f"{t.value} needs a switch location, got {loc!r}")
        for h in self.active.values():
            if h.spec.location_key() == spec.location_key():
                raise FaultError(f"conflicting fault already active at {spec.location_key()}")
        if t is FaultType.FIB_DISCREPANCY and "prefix" not in spec.params:
            raise FaultError("FIBDiscrepancy needs a prefix")
        if t in (FaultType.INGRESS_BGP_MODIFICATION, FaultType.EGRESS_BGP_MODIFICATION) \
                and "prefix" not in spec.params:
            raise FaultError(f"{t.value} needs a prefix")
        if t is FaultType.INCORRECT_FORWARDING_DROP and "flow" not in spec.params:
            raise FaultError("IncorrectForwardingDrop needs a flow")

    def inject(self, spec: FaultSpec) -> FaultHandle:
        self.validate(spec)
        undo = getattr(self, "_inject_" + spec.type.name.lower())(spec)
        h = FaultHandle(next(self._ids), spec, True, undo)
        self.active[h.hid] = h
        return h

    def revert(self, handle: FaultHandle):
        if not handle.active or handle.hid not in self.active:
            raise FaultError(f"fault handle {handle.hid} is not active")
        handle._undo()
        handle.active = False
        del self.active[handle.hid]

    def revert_all(self):
        for h in list(self.active.values()):
            self.revert(h)

    # helpers
    def _rng(self, spec):
        return self.net.rng(spec.stream_name())

    def _p(self, spec):
        return float(spec.params.get("p", DEFAULT_PROBABILITY))

    def _switch_hook(self, sid, hook):
        sw = self.net.switches[sid]
        sw.hooks.append(hook)
        return lambda: sw.hooks.remove(hook)

    def _link_hook(self, lid, hook):
        link = self.net.links[lid]
        link.hooks.append(hook)
        return lambda: link.hooks.remove(hook)

    # one method per type
    def _inject_silent_drop_in_switch(self, spec):
        return self._switch_hook(spec.location, _SwitchDrop(self._rng(spec), self._p(spec)))

    def _inject_silent_drop_on_link(self, spec):
        return self._link_hook(spec.location, _LinkDrop(self._rng(spec), self._p(spec)))

    def _inject_corruption_on_link_ip(self, spec):
        return self._link_hook(spec.location, _LinkCorrupt(self._rng(spec), self._p(spec)))

    def _inject_incorrect_decrement_ttl(self, spec):
        return self._switch_hook(spec.location, _TtlDecrement(int(spec.params.get("ttl_delta", DEFAULT_TTL_DELTA))))

    def _inject_payload_corruption_in_switch(self, spec):
        return self._switch_hook(spec.location, _PayloadCorrupt(self._rng(spec), self._p(spec)))

    def _inject_incorrect_forwarding_drop(self, spec):
        dp = self.net.switches[spec.location].dp
        hook = _ForcedDrop(spec.params["flow"])
        dp.hooks.append(hook)
        return lambda: dp.hooks.remove(hook)

    def _inject_fib_discrepancy(self, spec):
        sw = self.net.switches[spec.location]
        p = spec.params["prefix"]
        sw.fib_suppressed.add(p)
        sw.refresh_fib()

        def undo():
            sw.fib_suppressed.discard(p)
            sw.refresh_fib()
        return undo

    def _bgp_rewrite(self, spec):
        p = spec.params["prefix"]
        bogus = spec.params.get("rewrite_to") or bogus_prefix(spec.location)
        peer = spec.location[1]

        def hook(from_peer, upd):
            if from_peer == peer and upd.prefix == p:
                return replace(upd, prefix=bogus)
            return upd
        return p, bogus, peer, hook

    def _inject_ingress_bgp_modification(self, spec):
        sp = self.net.switches[spec.location[0]].speaker
        p, bogus, peer, hook = self._bgp_rewrite(spec)
        sp.inbound_hooks.append(hook)
        sp.purge_rib_in(peer, p, self.net.now)
        sp.request_refresh(peer)

        def undo():
            sp.inbound_hooks.remove(hook)
            sp.purge_rib_in(peer, bogus, self.net.now)
            sp.request_refresh(peer)
        return undo

    def _inject_egress_bgp_modification(self, spec):
        from .controlplane import BgpUpdate
        sp = self.net.switches[spec.location[0]].speaker
        p, bogus, peer, hook = self._bgp_rewrite(spec)
        sp.outbound_hooks.append(hook)
        if sp.running:
            sp.send_raw(peer, [BgpUpdate("withdraw", p)])
            sp.soft_refresh(peer)

        def undo():
            sp.outbound_hooks.remove(hook)
            sp.send_raw(peer, [BgpUpdate("withdraw", bogus)])
            if sp.running:
                sp.soft_refresh(peer)
        return undo

    def _inject_bgp_neighbor_missing(self, spec):
        return self._switch_hook(spec.location[0], _BgpBlock(spec.location[1]))

    def _inject_routing_daemon_crash(self, spec):
        sp = self.net.switches[spec.location].speaker
        sp.crash()
        return lambda: sp.restart(self.net.now)

    def _inject_link_down(self, spec):
        link = self.net.links[spec.location]
        link.up = False

        def undo():
            link.up = True
        return undo

    def _inject_agent_crash(self, spec):
        agent = self.net.switches[spec.location].agent

        def undo():
            agent.alive = True
        agent.alive = False
        return undo

    def _inject_switch_crash(self, spec):
        sw = self.net.switches[spec.location]
        sw.alive = False
        sw.speaker.crash()

        def undo():
            sw.alive = True
            sw.speaker.restart(self.net.now)
        return undo

    def _inject_route_oscillation(self, spec):
        sw = self.net.switches[spec.location]
        p = spec.params.get("prefix") or bogus_prefix(("osc", spec.location))
        state = {"on": True, "phase": False}

        def flip():
            if not state["on"]:
                return
            state["phase"] = not state["phase"]
            sw.speaker.set_originated(p, state["phase"], self.net.now)
            self.net.kernel.schedule(OSCILLATION_PERIOD_US, flip, kind="oscillation")

        flip()

        def undo():
            state["on"] = False
            sw.speaker.set_originated(p, False, self.net.now)
        return undo
