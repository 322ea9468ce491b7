"""Topology, configuration, packet and table types shared by the simulator.

The topology document is a line-oriented text format::

    [switches]
    # id  asn  loopback  ports
    S0 1 10.255.0.0 4
    [hosts]
    # id  attach  address/len  gateway  [sip=addr] [diag]
    H0 S0:1 10.1.0.10/24 10.1.0.1 sip=10.1.0.11 diag
    [links]
    # id  endpoint-a  address-a/len  endpoint-b  address-b/len
    L0 S0:2 172.16.0.0/31 S1:1 172.16.0.1/31
    [bgp]
    # switch  peer  policy-in  policy-out
    S0 S1 all all
    [acl]
    # switch  action  flow
    S0 deny dst=10.3.0.0/16
    [originate]
    S0 10.1.0.0/24
    [static]
    # switch  prefix  egress-interface
    S0 10.9.0.0/24 2

Interface 0 of every switch is its loopback; physical ports are numbered
1..ports.  MAC addresses are synthesized from node and port indices.
"""
from __future__ import annotations

import enum
import ipaddress
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

SwitchId = str
HostId = str
LinkId = str

DEFAULT_TTL = 64
DEFAULT_LOCAL_PREF = 100
IPV4_TOTAL_LENGTH = 84


class TopologyError(ValueError):
    """Raised for malformed or invalid topology documents."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Protocol(enum.IntEnum):
    # values double as the IPv4 protocol byte in the header serialization
    ICMP = 1
    TCP = 6
    UDP = 17
    BGP = 252
    MARKER = 253
    MGMT = 254


DATA_PROTOCOLS = frozenset({Protocol.ICMP, Protocol.TCP, Protocol.UDP})


def ip_int(text) -> int:
    return int(ipaddress.IPv4Address(text))


def ip_str(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def mac_str(value: int) -> str:
    raw = f"{value:012x}"
    return ":".join(raw[i:i + 2] for i in range(0, 12, 2))


@dataclass(frozen=True, order=True)
class Prefix:
    """An IPv4 prefix stored as (network int, length)."""

    network: int
    length: int

    def __post_init__(self):
        if not 0 <= self.length <= 32:
            raise ValueError(f"bad prefix length {self.length}")
        if self.network & ~self.mask & 0xFFFFFFFF:
            raise ValueError(f"host bits set in {ip_str(self.network)}/{self.length}")

    @property
    def mask(self) -> int:
        return (0xFFFFFFFF << (32 - self.length)) & 0xFFFFFFFF

    @classmethod
    def parse(cls, text: str) -> Prefix:
        net = ipaddress.IPv4Network(text, strict=True)
        return cls(int(net.network_address), net.prefixlen)

    @classmethod
    def host(cls, address: int) -> Prefix:
        return cls(address, 32)

    @classmethod
    def covering(cls, address: int, length: int) -> Prefix:
        mask = (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF
        return cls(address & mask, length)

    def contains(self, address: int) -> bool:
        return address & self.mask == self.network

    def contains_prefix(self, other: Prefix) -> bool:
        return other.length >= self.length and self.contains(other.network)

    def __str__(self):
        return f"{ip_str(self.network)}/{self.length}"


@dataclass(slots=True)
class Packet:
    src_mac: int
    dst_mac: int
    src_ip: int
    dst_ip: int
    protocol: Protocol
    ttl: int = DEFAULT_TTL
    dscp: int = 0
    ident: int = 0
    src_port: int = 0
    dst_port: int = 0
    header_checksum: int = 0
    payload_digest: int = 0
    l4_checksum: int = 0
    trace: bool = False
    # switch-local metadata, never serialized into the header
    ingress_ts: int = 0
    body: object = None

    def copy(self, **changes) -> Packet:
        return replace(self, **changes)

    def header_dict(self) -> dict:
        return {
            "src_mac": mac_str(self.src_mac),
            "dst_mac": mac_str(self.dst_mac),
            "src_ip": ip_str(self.src_ip),
            "dst_ip": ip_str(self.dst_ip),
            "protocol": self.protocol.name,
            "ttl": self.ttl,
            "dscp": self.dscp,
            "ident": self.ident,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "header_checksum": self.header_checksum,
            "trace": self.trace,
        }


def payload_check(digest: int) -> int:
    """16-bit fold of the payload digest; stands in for the L4 checksum."""
    total = 0
    for shift in range(0, 64, 16):
        total += (digest >> shift) & 0xFFFF
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


@dataclass(frozen=True)
class FlowSpec:
    """5-tuple pattern; ``None`` fields are wildcards."""

    src: Prefix | None = None
    dst: Prefix | None = None
    protocol: Protocol | None = None
    src_port: int | None = None
    dst_port: int | None = None

    def matches(self, pkt: Packet) -> bool:
        return flow_matches(self, pkt)

    def is_wildcard(self) -> bool:
        return all(v is None for v in (self.src, self.dst, self.protocol, self.src_port, self.dst_port))

    @classmethod
    def parse(cls, text: str) -> FlowSpec:
        text = text.strip()
        if text in ("", "*"):
            return cls()
        fields = {}
        for item in text.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"bad flow field {item!r}")
            key = key.strip()
            value = value.strip()
            if value == "*":
                continue
            if key in ("src", "dst"):
                fields[key] = Prefix.parse(value if "/" in value else value + "/32")
            elif key == "proto":
                fields["protocol"] = Protocol[value.upper()]
            elif key in ("sport", "dport"):
                port = int(value)
                if not 0 <= port <= 0xFFFF:
                    raise ValueError(f"port out of range: {port}")
                fields["src_port" if key == "sport" else "dst_port"] = port
            else:
                raise ValueError(f"unknown flow field {key!r}")
        return cls(**fields)

    def __str__(self):
        parts = []
        if self.src is not None:
            parts.append(f"src={self.src}")
        if self.dst is not None:
            parts.append(f"dst={self.dst}")
        if self.protocol is not None:
            parts.append(f"proto={self.protocol.name}")
        if self.src_port is not None:
            parts.append(f"sport={self.src_port}")
        if self.dst_port is not None:
            parts.append(f"dport={self.dst_port}")
        return ",".join(parts) or "*"


def flow_matches(spec: FlowSpec, pkt: Packet) -> bool:
    if spec.src is not None and not spec.src.contains(pkt.src_ip):
        return False
    if spec.dst is not None and not spec.dst.contains(pkt.dst_ip):
        return False
    if spec.protocol is not None and spec.protocol != pkt.protocol:
        return False
    if spec.src_port is not None and spec.src_port != pkt.src_port:
        return False
    if spec.dst_port is not None and spec.dst_port != pkt.dst_port:
        return False
    return True


class Action(enum.Enum):
    PERMIT = "permit"
    DENY = "deny"


@dataclass(frozen=True)
class AclRule:
    flow: FlowSpec
    action: Action


@dataclass(frozen=True)
class FibEntry:
    prefix: Prefix
    # None means deliver to the local CPU
    egress_if: int | None
    next_hop_mac: int = 0
    source: str = "bgp"


@dataclass(frozen=True)
class RibEntry:
    prefix: Prefix
    next_hop: SwitchId | None
    as_path: tuple = ()
    local_pref: int = DEFAULT_LOCAL_PREF
    source: str = "local"
    # switches the advertisement traversed; loop guard inside an AS
    hops: tuple = ()

    def to_dict(self) -> dict:
        return {
            "prefix": str(self.prefix),
            "next_hop": self.next_hop,
            "as_path": list(self.as_path),
            "local_pref": self.local_pref,
            "source": self.source,
            "hops": list(self.hops),
        }


class PolicyAction(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    SET_LOCAL_PREF = "pref"


class AdvertiseScope(enum.Enum):
    ALL = "all"
    OWN_AS_ONLY = "own"


@dataclass(frozen=True)
class PolicyClause:
    prefix: Prefix | None
    asn: int | None
    action: PolicyAction
    value: int = 0

    def matches(self, prefix: Prefix, as_path) -> bool:
        if self.prefix is not None and not self.prefix.contains_prefix(prefix):
            return False
        if self.asn is not None and self.asn not in as_path:
            return False
        return True


@dataclass(frozen=True)
class FilterPolicy:
    clauses: tuple = ()
    scope: AdvertiseScope = AdvertiseScope.ALL

    @classmethod
    def parse(cls, text: str) -> FilterPolicy:
        tokens = text.split("|")
        scope = AdvertiseScope(tokens[0])
        clauses = []
        for tok in tokens[1:]:
            head, *rest = tok.split("@")
            value = 0
            if head.startswith("pref="):
                action = PolicyAction.SET_LOCAL_PREF
                value = int(head[5:])
            else:
                action = PolicyAction(head)
            pfx = rest[0] if rest else "*"
            asn = rest[1] if len(rest) > 1 else "*"
            clauses.append(PolicyClause(
                None if pfx == "*" else Prefix.parse(pfx),
                None if asn == "*" else int(asn),
                action, value))
        return cls(tuple(clauses), scope)

    def __str__(self):
        parts = [self.scope.value]
        for c in self.clauses:
            head = f"pref={c.value}" if c.action is PolicyAction.SET_LOCAL_PREF else c.action.value
            asn = "*" if c.asn is None else str(c.asn)
            parts.append(f"{head}@{c.prefix if c.prefix else '*'}@{asn}")
        return "|".join(parts)


ACCEPT_ALL = FilterPolicy()


@dataclass
class Interface:
    index: int
    ip: int
    prefixlen: int
    mac: int
    link_id: LinkId | None = None
    peer: tuple | None = None  # (node id, interface index)

    @property
    def subnet(self) -> Prefix:
        return Prefix.covering(self.ip, self.prefixlen)


@dataclass(frozen=True)
class BgpSessionConfig:
    peer: SwitchId
    local_if: int
    policy_in: FilterPolicy = ACCEPT_ALL
    policy_out: FilterPolicy = ACCEPT_ALL


@dataclass
class SwitchConfig:
    switch_id: SwitchId
    asn: int
    loopback: int
    ports: int
    interfaces: dict = field(default_factory=dict)  # index -> Interface
    sessions: dict = field(default_factory=dict)  # peer -> BgpSessionConfig
    originated: list = field(default_factory=list)
    acl: list = field(default_factory=list)
    static_routes: list = field(default_factory=list)  # (Prefix, egress if)


@dataclass
class HostConfig:
    host_id: HostId
    switch: SwitchId
    port: int
    ip: int
    prefixlen: int
    gateway: int
    mac: int
    secondary_ip: int | None = None
    diag: bool = False

    @property
    def subnet(self) -> Prefix:
        return Prefix.covering(self.ip, self.prefixlen)


@dataclass(frozen=True)
class Link:
    link_id: LinkId
    a: tuple  # (node, interface)
    b: tuple
    a_addr: tuple  # (ip int, prefixlen)
    b_addr: tuple

    def other(self, node) -> tuple:
        if self.a[0] == node:
            return self.b
        if self.b[0] == node:
            return self.a
        raise KeyError(node)


@dataclass
class Topology:
    switches: list
    hosts: list
    links: list
    as_assignment: dict
    diagnosis_host: HostId
    configs: dict  # SwitchId -> SwitchConfig
    host_configs: dict  # HostId -> HostConfig

    def link(self, link_id) -> Link:
        return self._links_by_id[link_id]

    def __post_init__(self):
        self._links_by_id = {l.link_id: l for l in self.links}

    def switch_index(self, sid) -> int:
        return self.switches.index(sid)

    def neighbors(self, sid) -> list:
        out = []
        for iface in self.configs[sid].interfaces.values():
            if iface.peer and iface.peer[0] in self.configs:
                out.append(iface.peer[0])
        return sorted(out, key=self.switch_index)

    def link_between(self, a, b) -> Link | None:
        for l in self.links:
            if {l.a[0], l.b[0]} == {a, b}:
                return l
        return None

    def port_toward(self, a, b) -> int | None:
        for iface in self.configs[a].interfaces.values():
            if iface.peer and iface.peer[0] == b:
                return iface.index
        return None

    def edge_switch(self, host) -> SwitchId:
        return self.host_configs[host].switch

    def host_by_ip(self, ip) -> HostId | None:
        for h in self.hosts:
            hc = self.host_configs[h]
            if hc.ip == ip or hc.secondary_ip == ip:
                return h
        return None

    def owner_of(self, ip):
        """Node whose configured address equals ``ip``."""
        h = self.host_by_ip(ip)
        if h is not None:
            return h
        for sid, cfg in self.configs.items():
            if cfg.loopback == ip:
                return sid
            for iface in cfg.interfaces.values():
                if iface.ip == ip:
                    return sid
        return None


def switch_mac(index: int, port: int) -> int:
    return 0x020000000000 | (index << 8) | port


def host_mac(index: int) -> int:
    return 0x02AA00000000 | index


_SECTIONS = ("switches", "hosts", "links", "bgp", "acl", "originate", "static")


def _endpoint(text, lineno):
    node, sep, port = text.partition(":")
    if not sep:
        raise TopologyError(f"bad endpoint {text!r}", lineno)
    try:
        return node, int(port)
    except ValueError:
        raise TopologyError(f"bad interface index in {text!r}", lineno) from None


def _addr(text, lineno):
    try:
        iface = ipaddress.IPv4Interface(text)
    except ValueError:
        raise TopologyError(f"bad address {text!r}", lineno) from None
    return int(iface.ip), iface.network.prefixlen


def load_topology(text: str) -> Topology:
    """Parse and validate a topology document."""
    rows = {s: [] for s in _SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            name = line.strip("[]").strip()
            if name not in rows:
                raise TopologyError(f"unknown section [{name}]", lineno)
            section = name
            continue
        if section is None:
            raise TopologyError("content before first section", lineno)
        rows[section].append((lineno, line.split()))

    configs = {}
    switches = []
    for lineno, f in rows["switches"]:
        if len(f) != 4:
            raise TopologyError("switch line needs: id asn loopback ports", lineno)
        sid = f[0]
        if sid in configs:
            raise TopologyError(f"duplicate switch {sid}", lineno)
        try:
            cfg = SwitchConfig(sid, int(f[1]), ip_int(f[2]), int(f[3]))
        except ValueError as exc:
            raise TopologyError(f"switch {sid}: {exc}", lineno) from None
        configs[sid] = cfg
        switches.append(sid)
    index = {sid: i for i, sid in enumerate(switches)}

    used = {}

    def claim(node, port, what, lineno):
        cfg = configs.get(node)
        if cfg is None:
            raise TopologyError(f"{what} references unknown switch {node}", lineno)
        if not 1 <= port <= cfg.ports:
            raise TopologyError(f"{what}: switch {node} has no interface {port}", lineno)
        if (node, port) in used:
            raise TopologyError(f"{what}: interface {node}:{port} already used by {used[(node, port)]}", lineno)
        used[(node, port)] = what

    host_configs = {}
    hosts = []
    diag = []
    for lineno, f in rows["hosts"]:
        if len(f) < 4:
            raise TopologyError("host line needs: id attach address/len gateway", lineno)
        hid = f[0]
        if hid in host_configs or hid in configs:
            raise TopologyError(f"duplicate node {hid}", lineno)
        node, port = _endpoint(f[1], lineno)
        claim(node, port, f"host {hid}", lineno)
        ip, plen = _addr(f[2], lineno)
        gw = ip_int(f[3])
        sip = None
        is_diag = False
        for opt in f[4:]:
            if opt == "diag":
                is_diag = True
            elif opt.startswith("sip="):
                sip = ip_int(opt[4:])
            else:
                raise TopologyError(f"unknown host option {opt!r}", lineno)
        hc = HostConfig(hid, node, port, ip, plen, gw, host_mac(len(hosts)), sip, is_diag)
        if not hc.subnet.contains(gw):
            raise TopologyError(f"host {hid}: gateway outside subnet", lineno)
        host_configs[hid] = hc
        hosts.append(hid)
        if is_diag:
            diag.append(hid)
        configs[node].interfaces[port] = Interface(
            port, gw, plen, switch_mac(index[node], port), None, (hid, 0))

    links = []
    for lineno, f in rows["links"]:
        if len(f) != 5:
            raise TopologyError("link line needs: id a addr-a b addr-b", lineno)
        lid = f[0]
        a = _endpoint(f[1], lineno)
        b = _endpoint(f[3], lineno)
        claim(a[0], a[1], f"link {lid}", lineno)
        claim(b[0], b[1], f"link {lid}", lineno)
        if a[0] == b[0]:
            raise TopologyError(f"link {lid} is a self-loop", lineno)
        a_addr = _addr(f[2], lineno)
        b_addr = _addr(f[4], lineno)
        link = Link(lid, a, b, a_addr, b_addr)
        if any(l.link_id == lid for l in links):
            raise TopologyError(f"duplicate link {lid}", lineno)
        links.append(link)
        configs[a[0]].interfaces[a[1]] = Interface(
            a[1], a_addr[0], a_addr[1], switch_mac(index[a[0]], a[1]), lid, b)
        configs[b[0]].interfaces[b[1]] = Interface(
            b[1], b_addr[0], b_addr[1], switch_mac(index[b[0]], b[1]), lid, a)

    for lineno, f in rows["bgp"]:
        if len(f) != 4:
            raise TopologyError("bgp line needs: switch peer policy-in policy-out", lineno)
        sid, peer = f[0], f[1]
        for node in (sid, peer):
            if node not in configs:
                raise TopologyError(f"bgp session references unknown switch {node}", lineno)
        port = None
        for iface in configs[sid].interfaces.values():
            if iface.peer and iface.peer[0] == peer:
                port = iface.index
                break
        if port is None:
            raise TopologyError(f"bgp session {sid}->{peer}: switches are not adjacent", lineno)
        try:
            pin, pout = FilterPolicy.parse(f[2]), FilterPolicy.parse(f[3])
        except (ValueError, KeyError) as exc:
            raise TopologyError(f"bgp session {sid}->{peer}: bad policy ({exc})", lineno) from None
        if peer in configs[sid].sessions:
            raise TopologyError(f"duplicate bgp session {sid}->{peer}", lineno)
        configs[sid].sessions[peer] = BgpSessionConfig(peer, port, pin, pout)

    for lineno, f in rows["acl"]:
        if len(f) != 3 or f[0] not in configs:
            raise TopologyError("acl line needs: switch action flow", lineno)
        try:
            rule = AclRule(FlowSpec.parse(f[2]), Action(f[1]))
        except (ValueError, KeyError) as exc:
            raise TopologyError(f"bad acl rule ({exc})", lineno) from None
        configs[f[0]].acl.append(rule)

    for lineno, f in rows["originate"]:
        if len(f) != 2 or f[0] not in configs:
            raise TopologyError("originate line needs: switch prefix", lineno)
        try:
            configs[f[0]].originated.append(Prefix.parse(f[1]))
        except ValueError as exc:
            raise TopologyError(str(exc), lineno) from None

    for lineno, f in rows["static"]:
        if len(f) != 3 or f[0] not in configs:
            raise TopologyError("static line needs: switch prefix interface", lineno)
        port = int(f[2])
        if port not in configs[f[0]].interfaces:
            raise TopologyError(f"static route: switch {f[0]} has no interface {port}", lineno)
        configs[f[0]].static_routes.append((Prefix.parse(f[1]), port))

    topo = Topology(
        switches=switches,
        hosts=hosts,
        links=links,
        as_assignment={s: configs[s].asn for s in switches},
        diagnosis_host=diag[0] if len(diag) == 1 else None,
        configs=configs,
        host_configs=host_configs,
    )
    validate(topo, len(diag))
    return topo


def validate(topo: Topology, diag_count: int = 1) -> None:
    if diag_count != 1:
        raise TopologyError(f"expected exactly one diagnosis host, found {diag_count}")
    seen = {}
    for sid in topo.switches:
        cfg = topo.configs[sid]
        addrs = [("loopback", cfg.loopback)] + [(f"if{i.index}", i.ip) for i in cfg.interfaces.values()]
        for what, ip in addrs:
            if ip in seen:
                raise TopologyError(f"address {ip_str(ip)} of {sid} {what} duplicates {seen[ip]}")
            seen[ip] = f"{sid} {what}"
        for peer, sess in cfg.sessions.items():
            if sid not in topo.configs[peer].sessions:
                raise TopologyError(f"bgp session {sid}->{peer} has no reverse session")
    for hid in topo.hosts:
        hc = topo.host_configs[hid]
        for ip in (hc.ip, hc.secondary_ip):
            if ip is None:
                continue
            if ip in seen:
                raise TopologyError(f"address {ip_str(ip)} of host {hid} duplicates {seen[ip]}")
            seen[ip] = f"host {hid}"
    for link in topo.links:
        la = Prefix.covering(*link.a_addr)
        if la != Prefix.covering(*link.b_addr):
            raise TopologyError(f"link {link.link_id}: endpoint addresses in different subnets")
    if topo.switches:
        start = topo.switches[0]
        reached = {start}
        queue = deque([start])
        while queue:
            s = queue.popleft()
            for n in topo.neighbors(s):
                if n not in reached:
                    reached.add(n)
                    queue.append(n)
        missing = [s for s in topo.switches if s not in reached]
        if missing:
            raise TopologyError(f"topology is not connected; unreachable: {', '.join(missing)}")


def serialize_topology(topo: Topology) -> str:
    """Emit the canonical document form; ``load_topology`` round-trips it."""
    out = ["[switches]"]
    for sid in topo.switches:
        c = topo.configs[sid]
        out.append(f"{sid} {c.asn} {ip_str(c.loopback)} {c.ports}")
    out.append("[hosts]")
    for hid in topo.hosts:
        h = topo.host_configs[hid]
        line = f"{hid} {h.switch}:{h.port} {ip_str(h.ip)}/{h.prefixlen} {ip_str(h.gateway)}"
        if h.secondary_ip is not None:
            line += f" sip={ip_str(h.secondary_ip)}"
        if h.diag:
            line += " diag"
        out.append(line)
    out.append("[links]")
    for l in topo.links:
        out.append(
            f"{l.link_id} {l.a[0]}:{l.a[1]} {ip_str(l.a_addr[0])}/{l.a_addr[1]} "
            f"{l.b[0]}:{l.b[1]} {ip_str(l.b_addr[0])}/{l.b_addr[1]}")
    out.append("[bgp]")
    for sid in topo.switches:
        for peer, s in topo.configs[sid].sessions.items():
            out.append(f"{sid} {peer} {s.policy_in} {s.policy_out}")
    out.append("[acl]")
    for sid in topo.switches:
        for rule in topo.configs[sid].acl:
            out.append(f"{sid} {rule.action.value} {rule.flow}")
    out.append("[originate]")
    for sid in topo.switches:
        for p in topo.configs[sid].originated:
            out.append(f"{sid} {p}")
    out.append("[static]")
    for sid in topo.switches:
        for p, port in topo.configs[sid].static_routes:
            out.append(f"{sid} {p} {port}")
    return "\n".join(out) + "\n"


REFERENCE_TOPOLOGY = Path(__file__).parent / "data" / "reference.topo"


def load_reference_topology() -> Topology:
    return load_topology(REFERENCE_TOPOLOGY.read_text())


def load_topology_file(path) -> Topology:
    return load_topology(Path(path).read_text())
