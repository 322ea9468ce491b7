"""BGP-lite routing process: sessions, update processing, best path, FIB install.

Sessions run between physically adjacent switches only.  Inside an AS the
same hop-by-hop sessions carry routes (no IGP); the AS number is prepended
only when a route leaves its AS.  Each route records the switches it has
traversed (``hops``), used both for loop suppression and as a tie-break.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from .netmodel import (
    ACCEPT_ALL, AdvertiseScope, DEFAULT_LOCAL_PREF, FibEntry, FilterPolicy, PolicyAction,
    Prefix, RibEntry,
)

log = logging.getLogger(__name__)

__all__ = [
    "SessionState", "BgpSessionState", "BgpUpdate", "BgpSpeaker", "FilterPolicy",
    "apply_policy_in", "export_route", "best_path_select", "route_key", "build_fib",
    "install_fib", "DaemonDown",
]

HOLD_TIME_US = 900_000
KEEPALIVE_US = HOLD_TIME_US // 3
CONNECT_RETRY_US = 300_000
TICK_US = 100_000


class SessionState(enum.Enum):
    IDLE = "Idle"
    CONNECTING = "Connecting"
    ESTABLISHED = "Established"
    DOWN = "Down"


class DaemonDown(RuntimeError):
    """Routing process is not running."""


@dataclass(frozen=True)
class BgpUpdate:
    kind: str  # "announce" | "withdraw"
    prefix: Prefix
    as_path: tuple = ()
    local_pref: int = DEFAULT_LOCAL_PREF
    hops: tuple = ()
    sender: str | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "prefix": str(self.prefix)}
        if self.kind == "announce":
            d.update(as_path=list(self.as_path), local_pref=self.local_pref, hops=list(self.hops))
        return d

    @classmethod
    def from_dict(cls, d, sender=None) -> BgpUpdate:
        return cls(d["kind"], Prefix.parse(d["prefix"]), tuple(d.get("as_path", ())),
                   d.get("local_pref", DEFAULT_LOCAL_PREF), tuple(d.get("hops", ())), sender)


@dataclass
class BgpSessionState:
    peer: str
    local_if: int
    peer_asn: int
    policy_in: FilterPolicy = ACCEPT_ALL
    policy_out: FilterPolicy = ACCEPT_ALL
    state: SessionState = SessionState.IDLE
    last_rx: int = 0
    last_tx: int = 0
    last_open: int = -CONNECT_RETRY_US
    hold_time: int = HOLD_TIME_US
    rib_in: dict = field(default_factory=dict)
    rib_out: dict = field(default_factory=dict)
    flaps: int = 0

    def to_dict(self) -> dict:
        return {"peer": self.peer, "state": self.state.value, "local_if": self.local_if,
                "last_rx": self.last_rx, "hold_time": self.hold_time, "flaps": self.flaps}


# --- pure route logic (shared vocabulary with the oracle, separate code) ----

def apply_policy_in(policy: FilterPolicy, prefix, as_path, local_pref):
    """Returns the resulting local preference, or None when rejected."""
    for clause in policy.clauses:
        if clause.matches(prefix, as_path):
            if clause.action is PolicyAction.REJECT:
                return None
            if clause.action is PolicyAction.SET_LOCAL_PREF:
                return clause.value
            return local_pref
    return local_pref


def export_route(route: RibEntry, policy: FilterPolicy, own_asn: int, peer_asn: int, peer: str):
    """Announcement sent to ``peer`` for ``route``, or None if not exported."""
    if peer in route.hops:
        return None
    if policy.scope is AdvertiseScope.OWN_AS_ONLY and route.as_path:
        return None
    for clause in policy.clauses:
        if clause.matches(route.prefix, route.as_path):
            if clause.action is PolicyAction.REJECT:
                return None
            break
    if peer_asn != own_asn:
        return BgpUpdate("announce", route.prefix, (own_asn,) + route.as_path,
                         DEFAULT_LOCAL_PREF, route.hops)
    return BgpUpdate("announce", route.prefix, route.as_path, route.local_pref, route.hops)


def route_key(entry: RibEntry, neighbor_rank) -> tuple:
    """Smaller is better."""
    if entry.next_hop is None:
        return (0,)
    return (1, -entry.local_pref, len(entry.as_path), len(entry.hops), neighbor_rank(entry.next_hop))


def best_path_select(candidates, neighbor_rank=None) -> RibEntry | None:
    """Highest localPref, shortest AS path, fewest hops, lowest neighbor rank."""
    if neighbor_rank is None:
        neighbor_rank = _natural_rank
    best = None
    best_key = None
    for c in candidates:
        k = route_key(c, neighbor_rank)
        if best is None or k < best_key:
            best, best_key = c, k
    return best


def _natural_rank(sid):
    digits = "".join(ch for ch in str(sid) if ch.isdigit())
    return (int(digits) if digits else -1, str(sid))


def build_fib(config, rib: dict, neighbor_mac, static=(), suppressed=frozenset()) -> dict:
    """Desired FIB from connected interfaces, static routes and the RIB.

    ``neighbor_mac(port)`` gives the MAC of the node at the far end of a port.
    Precedence on equal prefixes: connected, static, BGP.
    """
    fib = {}
    for p, port in static:
        fib[p] = FibEntry(p, port, neighbor_mac(port), "static")
    for route in rib.values():
        if route.next_hop is None or route.prefix in fib or route.prefix in suppressed:
            continue
        port = config.sessions[route.next_hop].local_if
        fib[route.prefix] = FibEntry(route.prefix, port, neighbor_mac(port), "bgp")
    lo = Prefix.host(config.loopback)
    fib[lo] = FibEntry(lo, None, 0, "connected")
    for iface in config.interfaces.values():
        fib[iface.subnet] = FibEntry(iface.subnet, iface.index, neighbor_mac(iface.index), "connected")
    return fib


def install_fib(fib, desired: dict) -> dict:
    """Apply ``desired`` to a live Fib; returns {'added': [...], 'removed': [...]}."""
    added, removed = [], []
    for entry in fib.entries():
        if desired.get(entry.prefix) != entry:
            fib.remove(entry.prefix)
            removed.append(entry)
    for p, entry in desired.items():
        if fib.get(p) != entry:
            fib.install(entry)
            added.append(entry)
    return {"added": added, "removed": removed}


# --- the speaker -----------------------------------------------------------

class BgpSpeaker:
    """Per-switch routing process.

    ``send(peer, message)`` transmits a control message; ``on_change(prefixes)``
    is called after the RIB changed for the given prefixes.
    """

    def __init__(self, config, peer_asns: dict, neighbor_rank, send, on_change=None):
        self.config = config
        self.switch_id = config.switch_id
        self.asn = config.asn
        self.neighbor_rank = neighbor_rank
        self.send = send
        self.on_change = on_change or (lambda prefixes: None)
        self.sessions = {
            peer: BgpSessionState(peer, s.local_if, peer_asns[peer], s.policy_in, s.policy_out)
            for peer, s in config.sessions.items()
        }
        self.rib = {}
        self.running = True
        self.rib_changes = 0
        self.outbound_hooks = []  # f(peer, update) -> update | None
        self.inbound_hooks = []
        self.protocol_errors = 0
        self.originated = list(config.originated)
        self._originate()

    def _originate(self):
        for p in self.originated:
            self.rib[p] = RibEntry(p, None, (), DEFAULT_LOCAL_PREF, "local", (self.switch_id,))

    # -- lifecycle --
    def start(self, now):
        for s in self.sessions.values():
            self._open(s, now)

    def crash(self):
        self.running = False
        for s in self.sessions.values():
            s.state = SessionState.IDLE
            s.rib_in.clear()
            s.rib_out.clear()
        changed = list(self.rib)
        self.rib.clear()
        self.on_change(changed)

    def restart(self, now):
        self.running = True
        self._originate()
        self.on_change(list(self.rib))
        self.start(now)

    def _require_running(self):
        if not self.running:
            raise DaemonDown(f"routing process on {self.switch_id} is not running")

    def _open(self, s, now):
        s.state = SessionState.CONNECTING
        s.last_open = now
        s.last_tx = now
        self.send(s.peer, {"type": "OPEN", "asn": self.asn})

    def _session_down(self, s, now, reason):
        log.debug("%s: session to %s down (%s)", self.switch_id, s.peer, reason)
        s.state = SessionState.DOWN
        s.flaps += 1
        lost = list(s.rib_in)
        s.rib_in.clear()
        s.rib_out.clear()
        self._recompute(lost, now)

    # -- message input --
    def receive(self, peer, msg, now):
        if not self.running:
            return
        s = self.sessions.get(peer)
        if s is None:
            self.protocol_errors += 1
            return
        kind = msg.get("type")
        if kind == "OPEN":
            if msg.get("reply"):
                # answer to our own OPEN; crossing OPENs already established us
                if s.state is SessionState.ESTABLISHED:
                    s.last_rx = now
                    return
            else:
                if s.state is SessionState.ESTABLISHED:
                    # peer restarted
                    self._session_down(s, now, "peer re-open")
                self.send(s.peer, {"type": "OPEN", "asn": self.asn, "reply": True})
            s.state = SessionState.ESTABLISHED
            s.last_rx = now
            s.last_tx = now
            self._advertise_all(s)
            return
        if s.state is not SessionState.ESTABLISHED:
            self.protocol_errors += 1
            return
        s.last_rx = now
        if kind == "UPDATE":
            changed = []
            for d in msg.get("updates", ()):
                upd = BgpUpdate.from_dict(d, peer)
                for hook in self.inbound_hooks:
                    upd = hook(peer, upd)
                    if upd is None:
                        break
                if upd is None:
                    continue
                changed.extend(self.process_inbound_update(s, upd))
            self._recompute(changed, now)
        elif kind == "REFRESH":
            self._advertise_all(s, resend=True)

    def process_inbound_update(self, s: BgpSessionState, upd: BgpUpdate) -> list:
        """Update RIB-in for one message; returns prefixes whose RIB-in changed."""
        if s.state is not SessionState.ESTABLISHED:
            self.protocol_errors += 1
            return []
        prev = s.rib_in.get(upd.prefix)
        if upd.kind == "withdraw":
            if prev is None:
                return []
            del s.rib_in[upd.prefix]
            return [upd.prefix]
        entry = None
        if self.asn not in upd.as_path and self.switch_id not in upd.hops:
            lp = upd.local_pref if s.peer_asn == self.asn else DEFAULT_LOCAL_PREF
            lp = apply_policy_in(s.policy_in, upd.prefix, upd.as_path, lp)
            if lp is not None:
                entry = RibEntry(upd.prefix, s.peer, upd.as_path, lp, f"bgp:{s.peer}",
                                 upd.hops + (self.switch_id,))
        if entry is None:
            if prev is None:
                return []
            del s.rib_in[upd.prefix]
            return [upd.prefix]
        if prev == entry:
            return []
        s.rib_in[upd.prefix] = entry
        return [upd.prefix]

    # -- selection / output --
    def _candidates(self, prefix):
        out = []
        if prefix in self.originated:
            out.append(RibEntry(prefix, None, (), DEFAULT_LOCAL_PREF, "local", (self.switch_id,)))
        for s in self.sessions.values():
            e = s.rib_in.get(prefix)
            if e is not None:
                out.append(e)
        return out

    def _recompute(self, prefixes, now):
        changed = []
        for p in dict.fromkeys(prefixes):
            best = best_path_select(self._candidates(p), self.neighbor_rank)
            if self.rib.get(p) != best:
                if best is None:
                    del self.rib[p]
                else:
                    self.rib[p] = best
                changed.append(p)
        if changed:
            self.rib_changes += len(changed)
            for s in self.sessions.values():
                if s.state is SessionState.ESTABLISHED:
                    self._advertise(s, changed)
            self.on_change(changed)

    def generate_outbound_updates(self, s: BgpSessionState, prefixes) -> list:
        """Diff desired exports against RIB-out for ``prefixes``; updates RIB-out."""
        out = []
        for p in prefixes:
            route = self.rib.get(p)
            ann = None
            if route is not None:
                ann = export_route(route, s.policy_out, self.asn, s.peer_asn, s.peer)
            prev = s.rib_out.get(p)
            if ann is None:
                if prev is not None:
                    del s.rib_out[p]
                    out.append(BgpUpdate("withdraw", p))
            elif prev != ann:
                s.rib_out[p] = ann
                out.append(ann)
        return out

    def _transmit(self, s, updates):
        sent = []
        for u in updates:
            for hook in self.outbound_hooks:
                u = hook(s.peer, u)
                if u is None:
                    break
            if u is not None:
                sent.append(u.to_dict())
        if sent:
            self.send(s.peer, {"type": "UPDATE", "updates": sent})

    def _advertise(self, s, prefixes):
        self._transmit(s, self.generate_outbound_updates(s, sorted(prefixes)))

    def _advertise_all(self, s, resend=False):
        if resend:
            self._transmit(s, [s.rib_out[p] for p in sorted(s.rib_out)])
        else:
            s.rib_out.clear()
            self._advertise(s, list(self.rib))

    def soft_refresh(self, peer):
        """Re-send the full RIB-out toward ``peer``."""
        self._require_running()
        s = self.sessions[peer]
        if s.state is SessionState.ESTABLISHED:
            self._advertise_all(s, resend=True)

    def set_originated(self, prefix, on: bool, now):
        if on and prefix not in self.originated:
            self.originated.append(prefix)
        elif not on and prefix in self.originated:
            self.originated.remove(prefix)
        if self.running:
            self._recompute([prefix], now)

    def request_refresh(self, peer):
        self.send(peer, {"type": "REFRESH"})

    def purge_rib_in(self, peer, prefix, now):
        s = self.sessions[peer]
        if s.rib_in.pop(prefix, None) is not None:
            self._recompute([prefix], now)

    def send_raw(self, peer, updates):
        """Transmit updates bypassing RIB-out bookkeeping and hooks."""
        self.send(peer, {"type": "UPDATE", "updates": [u.to_dict() for u in updates]})

    # -- timers --
    def session_tick(self, now) -> list:
        """Keepalives, hold expiry, reconnects.  Returns (peer, old, new) transitions."""
        if not self.running:
            return []
        transitions = []
        for s in self.sessions.values():
            old = s.state
            if s.state is SessionState.ESTABLISHED:
                if now - s.last_rx > s.hold_time:
                    self._session_down(s, now, "hold timer expired")
                elif now - s.last_tx >= KEEPALIVE_US:
                    s.last_tx = now
                    self.send(s.peer, {"type": "KEEPALIVE"})
            elif now - s.last_open >= CONNECT_RETRY_US:
                self._open(s, now)
            if s.state is not old:
                transitions.append((s.peer, old, s.state))
        return transitions

    # -- views --
    def rib_dump(self):
        self._require_running()
        return [self.rib[p].to_dict() for p in sorted(self.rib)]

    def rib_in_dump(self):
        self._require_running()
        return {peer: [s.rib_in[p].to_dict() for p in sorted(s.rib_in)]
                for peer, s in sorted(self.sessions.items())}

    def rib_out_dump(self):
        self._require_running()
        return {peer: [s.rib_out[p].to_dict() for p in sorted(s.rib_out)]
                for peer, s in sorted(self.sessions.items())}

    def sessions_dump(self):
        self._require_running()
        return {peer: s.to_dict() for peer, s in sorted(self.sessions.items())}

    def established(self) -> bool:
        return all(s.state is SessionState.ESTABLISHED for s in self.sessions.values())
