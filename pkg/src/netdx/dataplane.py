"""Per-switch packet pipeline and the diagnosis instrumentation it carries.

Forwarding checks run in a fixed order: header checksum, ACL, local
delivery, TTL, FIB.  Only packets with the trace bit set touch the counters
and header logs.
"""
from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass

from .netmodel import Action, FibEntry, FlowSpec, IPV4_TOTAL_LENGTH, Packet, Prefix

MIRROR_DSCP = 0x14
DEFAULT_WINDOW_US = 200_000
DEFAULT_LOG_CAPACITY = 16


class DropReason(enum.Enum):
    NO_FIB = "NoFibEntry"
    ACL_DENY = "AclDeny"
    ZERO_TTL = "ZeroTtl"
    BAD_CHECKSUM = "BadHeaderChecksum"
    CONGESTION = "Congestion"  # reserved, never produced
    SILENT_INJECTED = "SilentInjected"


COUNTED_REASONS = (DropReason.NO_FIB, DropReason.ACL_DENY, DropReason.ZERO_TTL, DropReason.BAD_CHECKSUM)


@dataclass(frozen=True)
class Forward:
    egress_if: int


@dataclass(frozen=True)
class Drop:
    reason: DropReason


@dataclass(frozen=True)
class ToCpu:
    reason: str = "local"


# --- IPv4 header checksum -------------------------------------------------

def header_bytes(pkt: Packet, checksum: int | None = None) -> bytes:
    """Standard 20-byte IPv4 header built from the modeled fields.

    Layout: version/IHL=0x45, TOS=dscp<<2, total length (fixed), ident,
    flags/fragment=0, TTL, protocol, checksum, source, destination.
    """
    csum = pkt.header_checksum if checksum is None else checksum
    return struct.pack(
        "!BBHHHBBHII",
        0x45, (pkt.dscp & 0x3F) << 2, IPV4_TOTAL_LENGTH, pkt.ident & 0xFFFF, 0,
        pkt.ttl & 0xFF, int(pkt.protocol) & 0xFF, csum & 0xFFFF,
        pkt.src_ip & 0xFFFFFFFF, pkt.dst_ip & 0xFFFFFFFF)


def ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for (word,) in struct.iter_unpack("!H", data):
        total += word
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    return (~ones_complement_sum(data)) & 0xFFFF


def ipv4_header_checksum(pkt: Packet) -> int:
    return internet_checksum(header_bytes(pkt, checksum=0))


def verify_header(pkt: Packet) -> int:
    """Zero iff the stored header checksum is correct."""
    return internet_checksum(header_bytes(pkt))


def seal(pkt: Packet) -> Packet:
    pkt.header_checksum = ipv4_header_checksum(pkt)
    return pkt


# --- tables ---------------------------------------------------------------

class Fib:
    """Prefix-unique forwarding table with longest-prefix-match lookup."""

    def __init__(self, entries=()):
        self._by_len = {}
        for e in entries:
            self.install(e)

    def install(self, entry: FibEntry):
        self._by_len.setdefault(entry.prefix.length, {})[entry.prefix.network] = entry

    def remove(self, prefix: Prefix) -> FibEntry | None:
        bucket = self._by_len.get(prefix.length)
        if not bucket:
            return None
        entry = bucket.pop(prefix.network, None)
        if not bucket:
            del self._by_len[prefix.length]
        return entry

    def get(self, prefix: Prefix) -> FibEntry | None:
        return self._by_len.get(prefix.length, {}).get(prefix.network)

    def lookup(self, dst: int) -> FibEntry | None:
        for length in sorted(self._by_len, reverse=True):
            mask = (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF
            entry = self._by_len[length].get(dst & mask)
            if entry is not None:
                return entry
        return None

    def entries(self) -> list:
        out = [e for bucket in self._by_len.values() for e in bucket.values()]
        return sorted(out, key=lambda e: e.prefix)

    def __len__(self):
        return sum(len(b) for b in self._by_len.values())

    def __iter__(self):
        return iter(self.entries())


def lpm_lookup(fib, dst: int) -> FibEntry | None:
    if isinstance(fib, Fib):
        return fib.lookup(dst)
    return Fib(fib).lookup(dst)


def acl_eval(rules, pkt: Packet) -> Action:
    for rule in rules:
        if rule.flow.matches(pkt):
            return rule.action
    return Action.PERMIT


# --- counters, logs, triggers ----------------------------------------------

class WindowedCounter:
    """Counts in two adjacent fixed windows plus a cumulative total."""

    __slots__ = ("window", "index", "current", "previous", "total", "late")

    def __init__(self, window: int = DEFAULT_WINDOW_US):
        self.window = window
        self.index = 0
        self.current = 0
        self.previous = 0
        self.total = 0
        self.late = 0

    def _roll(self, w):
        if w == self.index + 1:
            self.previous = self.current
        else:
            self.previous = 0
        self.current = 0
        self.index = w

    def add_window(self, w: int, n: int = 1):
        if w > self.index:
            self._roll(w)
        if w == self.index:
            self.current += n
        elif w == self.index - 1:
            self.previous += n
        else:
            self.late += n
        self.total += n

    def add(self, ts: int, n: int = 1):
        self.add_window(ts // self.window, n)

    def get(self, w: int):
        """Count for window ``w``; None once it has rolled out of view."""
        if w > self.index:
            return 0
        if w == self.index:
            return self.current
        if w == self.index - 1:
            return self.previous
        return None

    def to_dict(self) -> dict:
        return {"window": self.index, "current": self.current,
                "previous": self.previous, "total": self.total}


@dataclass
class TriggerConfig:
    drop_ratio_threshold: float = 0.2
    min_traced_per_window: int = 5
    window_us: int = DEFAULT_WINDOW_US
    suppress: bool = False

    def __post_init__(self):
        if not 0 < self.drop_ratio_threshold <= 1:
            raise ValueError("drop_ratio_threshold must be in (0, 1]")
        if self.min_traced_per_window < 1:
            raise ValueError("min_traced_per_window must be >= 1")


def check_fault_trigger(arrived: int, dropped: int, config: TriggerConfig) -> bool:
    if config.suppress or arrived < config.min_traced_per_window:
        return False
    return dropped / arrived >= config.drop_ratio_threshold


class PortState:
    def __init__(self, window, log_capacity):
        self.ingress = WindowedCounter(window)
        self.egress = WindowedCounter(window)  # keyed by ingress timestamp
        self.local = WindowedCounter(window)
        self.drops = {r: WindowedCounter(window) for r in COUNTED_REASONS}
        self.ingress_log = deque(maxlen=log_capacity)
        self.dropped_log = deque(maxlen=log_capacity)
        self.egress_log = deque(maxlen=log_capacity)

    def dropped_in(self, w):
        total = 0
        for c in self.drops.values():
            v = c.get(w)
            if v is None:
                return None
            total += v
        return total

    def to_dict(self) -> dict:
        return {
            "ingress": self.ingress.to_dict(),
            "egress": self.egress.to_dict(),
            "local": self.local.to_dict(),
            "drops": {r.value: c.to_dict() for r, c in self.drops.items()},
        }


class WindowNotClosed(RuntimeError):
    pass


@dataclass
class ConsistentReport:
    window: int
    ingress_sum: int
    egress_sum: int
    deliberate: int
    deficit: int

    def to_dict(self):
        return dict(self.__dict__)


def _log_entry(pkt: Packet, now: int, reason: DropReason | None = None) -> dict:
    entry = pkt.header_dict()
    entry["time"] = now
    entry["header_len"] = 20
    entry["checksum_ok"] = verify_header(pkt) == 0
    if reason is not None:
        entry["reason"] = reason.value
    return entry


class DataPlane:
    """Tables, instrumentation and the forwarding decision of one switch."""

    def __init__(self, ports, local_addrs, trigger: TriggerConfig | None = None,
                 log_capacity: int = DEFAULT_LOG_CAPACITY):
        self.trigger = trigger or TriggerConfig()
        self.window = self.trigger.window_us
        self.fib = Fib()
        self.acl = []
        self.trace_filter: FlowSpec | None = None
        self.local_addrs = set(local_addrs)
        self.ports = {p: PortState(self.window, log_capacity) for p in ports}
        self.inflight = {}
        self.hooks = []

    def is_local(self, ip: int) -> bool:
        return ip in self.local_addrs

    def decide(self, pkt: Packet) -> Forward | Drop | ToCpu:
        """Forwarding decision only; no counters touched."""
        if verify_header(pkt) != 0:
            return Drop(DropReason.BAD_CHECKSUM)
        if acl_eval(self.acl, pkt) is Action.DENY:
            return Drop(DropReason.ACL_DENY)
        if pkt.dst_ip in self.local_addrs:
            return ToCpu()
        for hook in self.hooks:
            forced = hook.forced_drop(pkt)
            if forced is not None:
                return Drop(forced)
        if pkt.ttl == 0:
            return Drop(DropReason.ZERO_TTL)
        entry = self.fib.lookup(pkt.dst_ip)
        if entry is None:
            return Drop(DropReason.NO_FIB)
        if entry.egress_if is None:
            return ToCpu()
        return Forward(entry.egress_if)

    def ingress(self, pkt: Packet, port: int, now: int):
        """Run the ingress pipeline; returns (decision, trigger_fired)."""
        pkt.ingress_ts = now
        tf = self.trace_filter
        if tf is not None and not pkt.trace and tf.matches(pkt):
            pkt.trace = True
        st = self.ports[port]
        if pkt.trace:
            st.ingress.add(now)
            st.ingress_log.append(_log_entry(pkt, now))
        decision = self.decide(pkt)
        fired = False
        if pkt.trace:
            if isinstance(decision, Drop):
                st.drops[decision.reason].add(now)
                st.dropped_log.append(_log_entry(pkt, now, decision.reason))
                w = now // self.window
                fired = check_fault_trigger(st.ingress.get(w), st.dropped_in(w), self.trigger)
            elif isinstance(decision, ToCpu):
                st.local.add(now)
            else:
                w = now // self.window
                self.inflight[w] = self.inflight.get(w, 0) + 1
        return decision, fired

    def discard(self, pkt: Packet):
        """A forwarded packet vanished inside the switch (silent drop)."""
        if pkt.trace:
            w = pkt.ingress_ts // self.window
            self.inflight[w] -= 1

    def egress(self, pkt: Packet, port: int, now: int) -> bool:
        """Egress accounting; returns True when the packet is mirrored to the CPU."""
        if pkt.trace:
            st = self.ports[port]
            w = pkt.ingress_ts // self.window
            st.egress.add_window(w)
            st.egress_log.append(_log_entry(pkt, now))
            left = self.inflight.get(w, 0) - 1
            if left <= 0:
                self.inflight.pop(w, None)
            else:
                self.inflight[w] = left
        return mirror_to_cpu(pkt)

    def silent_drop_check(self, window: int, now: int) -> ConsistentReport:
        if now // self.window <= window:
            raise WindowNotClosed(f"window {window} still open")
        if self.inflight.get(window, 0) > 0:
            raise WindowNotClosed(f"window {window} has buffered packets")
        ing = egr = deliberate = 0
        for st in self.ports.values():
            vals = (st.ingress.get(window), st.egress.get(window),
                    st.dropped_in(window), st.local.get(window))
            if any(v is None for v in vals):
                raise WindowNotClosed(f"window {window} no longer retained")
            ing += vals[0]
            egr += vals[1]
            deliberate += vals[2] + vals[3]
        return ConsistentReport(window, ing, egr, deliberate, ing - egr - deliberate)

    def counters_dict(self) -> dict:
        return {str(p): st.to_dict() for p, st in sorted(self.ports.items())}

    def drop_counters_dict(self, now: int) -> dict:
        w = now // self.window
        out = {}
        for p, st in sorted(self.ports.items()):
            out[str(p)] = {
                "arrived": {"current": st.ingress.get(w), "previous": st.ingress.get(w - 1) or 0},
                "drops": {r.value: {"current": c.get(w), "previous": c.get(w - 1) or 0,
                                    "total": c.total}
                          for r, c in st.drops.items()},
            }
        return out

    def header_logs_dict(self) -> dict:
        return {str(p): {"ingress": list(st.ingress_log), "dropped": list(st.dropped_log),
                         "egress": list(st.egress_log)}
                for p, st in sorted(self.ports.items())}


def transform_header(pkt: Packet, egress_mac: int, next_hop_mac: int) -> Packet:
    out = pkt.copy(src_mac=egress_mac, dst_mac=next_hop_mac, ttl=max(pkt.ttl - 1, 0))
    return seal(out)


def mirror_to_cpu(pkt: Packet) -> bool:
    return pkt.dscp == MIRROR_DSCP
