"""Configuration analysis: the fault-free expected state derived from configs.

Route propagation is evaluated as a synchronous fixpoint over the whole
network, independently of the event-driven routing process.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .netmodel import (
    Action, AdvertiseScope, DEFAULT_LOCAL_PREF, FibEntry, FlowSpec, Packet, PolicyAction, Prefix,
    Protocol, RibEntry, host_mac, ip_int, serialize_topology, switch_mac,
)


class OracleError(RuntimeError):
    pass


@dataclass
class ExpectedState:
    rib: dict = field(default_factory=dict)  # sid -> {prefix: RibEntry}
    rib_in: dict = field(default_factory=dict)  # sid -> {peer: {prefix: RibEntry}}
    rib_out: dict = field(default_factory=dict)  # sid -> {peer: {prefix: (as_path, lp, hops)}}
    fib: dict = field(default_factory=dict)  # sid -> {prefix: FibEntry}
    iterations: int = 0


def _policy(policy, prefix, as_path):
    """First matching clause action, or None."""
    for c in policy.clauses:
        if (c.prefix is None or c.prefix.contains_prefix(prefix)) and (c.asn is None or c.asn in as_path):
            return c
    return None


def _exported(topo, sid, peer, route):
    cfg = topo.configs[sid]
    pol = cfg.sessions[peer].policy_out
    if peer in route.hops:
        return None
    if pol.scope is AdvertiseScope.OWN_AS_ONLY and len(route.as_path) > 0:
        return None
    c = _policy(pol, route.prefix, route.as_path)
    if c is not None and c.action is PolicyAction.REJECT:
        return None
    if topo.as_assignment[peer] == cfg.asn:
        return (route.as_path, route.local_pref, route.hops)
    return ((cfg.asn,) + route.as_path, DEFAULT_LOCAL_PREF, route.hops)


def _imported(topo, sid, peer, prefix, adv):
    as_path, lp, hops = adv
    cfg = topo.configs[sid]
    if cfg.asn in as_path or sid in hops:
        return None
    if topo.as_assignment[peer] != cfg.asn:
        lp = DEFAULT_LOCAL_PREF
    c = _policy(cfg.sessions[peer].policy_in, prefix, as_path)
    if c is not None:
        if c.action is PolicyAction.REJECT:
            return None
        if c.action is PolicyAction.SET_LOCAL_PREF:
            lp = c.value
    return RibEntry(prefix, peer, as_path, lp, f"bgp:{peer}", hops + (sid,))


def _better(topo, a, b):
    """True when route ``a`` is preferred over ``b``."""
    def rank(r):
        if r.next_hop is None:
            return (0, 0, 0, 0, 0)
        return (1, -r.local_pref, len(r.as_path), len(r.hops), topo._rank[r.next_hop])
    return rank(a) < rank(b)


def compute_expected_state(topo, max_iterations: int | None = None) -> ExpectedState:
    key = (_fingerprint(topo), max_iterations)
    return _cached(key, topo, max_iterations)


def _fingerprint(topo) -> str:
    return hashlib.sha256(serialize_topology(topo).encode()).hexdigest()


_CACHE = {}


def _cached(key, topo, max_iterations):
    if key not in _CACHE:
        if len(_CACHE) > 256:
            _CACHE.clear()
        _CACHE[key] = _solve(topo, max_iterations)
    return _CACHE[key]


def _solve(topo, max_iterations):
    sw = topo.switches
    topo._rank = {s: i for i, s in enumerate(sw)}
    local = {s: {p: RibEntry(p, None, (), DEFAULT_LOCAL_PREF, "local", (s,))
                 for p in topo.configs[s].originated} for s in sw}
    rib = {s: dict(local[s]) for s in sw}
    limit = max_iterations or 4 * len(sw) + 16
    for it in range(1, limit + 1):
        out = {s: {peer: {} for peer in topo.configs[s].sessions} for s in sw}
        for s in sw:
            for peer in topo.configs[s].sessions:
                for p, r in rib[s].items():
                    adv = _exported(topo, s, peer, r)
                    if adv is not None:
                        out[s][peer][p] = adv
        rin = {s: {} for s in sw}
        new_rib = {}
        for s in sw:
            best = dict(local[s])
            for peer in topo.configs[s].sessions:
                got = {}
                for p, adv in out[peer][s].items():
                    e = _imported(topo, s, peer, p, adv)
                    if e is None:
                        continue
                    got[p] = e
                    if p not in best or _better(topo, e, best[p]):
                        best[p] = e
                rin[s][peer] = got
            new_rib[s] = best
        if new_rib == rib:
            state = ExpectedState(rib, rin, out, {}, it)
            for s in sw:
                state.fib[s] = _fib(topo, s, rib[s])
            return state
        rib = new_rib
    raise OracleError(f"route propagation did not converge within {limit} iterations")


def _far_mac(topo, sid, port):
    iface = topo.configs[sid].interfaces.get(port)
    if iface is None or iface.peer is None:
        return 0
    node, fport = iface.peer
    if node in topo.host_configs:
        return host_mac(topo.hosts.index(node))
    return switch_mac(topo.switch_index(node), fport)


def _fib(topo, sid, rib):
    cfg = topo.configs[sid]
    fib = {}
    for iface in cfg.interfaces.values():
        net = Prefix.covering(iface.ip, iface.prefixlen)
        fib[net] = FibEntry(net, iface.index, _far_mac(topo, sid, iface.index), "connected")
    lo = Prefix(cfg.loopback, 32)
    fib[lo] = FibEntry(lo, None, 0, "connected")
    for p, port in cfg.static_routes:
        if p not in fib:
            fib[p] = FibEntry(p, port, _far_mac(topo, sid, port), "static")
    for p, r in rib.items():
        if r.next_hop is None or p in fib:
            continue
        port = cfg.sessions[r.next_hop].local_if
        fib[p] = FibEntry(p, port, _far_mac(topo, sid, port), "bgp")
    return fib


# --- queries ----------------------------------------------------------------

def _lpm(fib, dst):
    best = None
    for p, e in fib.items():
        if p.contains(dst) and (best is None or p.length > best.prefix.length):
            best = e
    return best


def _acl_denies(rules, pkt):
    for r in rules:
        if r.flow.matches(pkt):
            return r.action is Action.DENY
    return False


class Oracle:
    """Query surface over an ExpectedState."""

    def __init__(self, topo):
        self.topo = topo
        self.state = compute_expected_state(topo)
        self._local = {}
        for s in topo.switches:
            cfg = topo.configs[s]
            self._local[s] = {cfg.loopback} | {i.ip for i in cfg.interfaces.values()}

    def _check(self, sid):
        if sid not in self.topo.configs:
            raise KeyError(f"unknown switch {sid}")

    def expected_rib(self, sid):
        self._check(sid)
        return self.state.rib[sid]

    def expected_fib(self, sid):
        self._check(sid)
        return self.state.fib[sid]

    def expected_route(self, sid, prefix) -> RibEntry | None:
        return self.expected_rib(sid).get(prefix)

    def expected_rib_out(self, sid, peer):
        self._check(sid)
        return self.state.rib_out[sid].get(peer, {})

    def expected_advertisers(self, prefix, sid) -> list:
        """Neighbors whose expected RIB-out toward ``sid`` carries ``prefix``.

        Ordered with the neighbor providing the expected best route first.
        """
        self._check(sid)
        out = [n for n in self.topo.configs[sid].sessions
               if prefix in self.state.rib_out[n].get(sid, {})]
        best = self.state.rib[sid].get(prefix)
        first = best.next_hop if best is not None else None
        return sorted(out, key=lambda n: (n != first, self.topo.switch_index(n)))

    def walk(self, start, pkt) -> tuple:
        """Follow expected FIBs from ``start``; returns (switches, outcome)."""
        path = []
        cur = start
        seen = set()
        while True:
            if cur in seen:
                return path, "loop"
            seen.add(cur)
            path.append(cur)
            cfg = self.topo.configs[cur]
            if _acl_denies(cfg.acl, pkt):
                return path, "acl"
            if pkt.dst_ip in self._local[cur]:
                return path, "local"
            e = _lpm(self.state.fib[cur], pkt.dst_ip)
            if e is None:
                return path, "nofib"
            if e.egress_if is None:
                return path, "local"
            node = cfg.interfaces[e.egress_if].peer[0]
            if node in self.topo.host_configs:
                hc = self.topo.host_configs[node]
                if pkt.dst_ip in (hc.ip, hc.secondary_ip):
                    return path, "delivered"
                return path, "nohost"
            cur = node

    def _flow_packet(self, flow: FlowSpec, src_ip):
        dst = flow.dst.network if flow.dst.length == 32 else flow.dst.network + 10
        return Packet(0, 0, src_ip, dst, flow.protocol or Protocol.UDP,
                      src_port=flow.src_port or 40000, dst_port=flow.dst_port or 33434)

    def _flow_start(self, flow: FlowSpec):
        if flow.src is None:
            raise ValueError("flow needs a source")
        src = flow.src.network
        owner = self.topo.owner_of(src)
        if owner in self.topo.host_configs:
            return self.topo.host_configs[owner].switch, src
        if owner in self.topo.configs:
            return owner, src
        for h, hc in self.topo.host_configs.items():
            if hc.subnet.contains(src):
                return hc.switch, src
        raise ValueError(f"no edge switch for source {flow.src}")

    def flow_path(self, flow: FlowSpec) -> tuple:
        start, src = self._flow_start(flow)
        return self.walk(start, self._flow_packet(flow, src))

    def should_forward(self, s2, s1, flow: FlowSpec) -> bool:
        self._check(s2)
        self._check(s1)
        path, _ = self.flow_path(flow)
        return any(a == s2 and b == s1 for a, b in zip(path, path[1:]))

    def on_path(self, sid, flow: FlowSpec) -> bool:
        path, _ = self.flow_path(flow)
        return sid in path

    def upstream_of(self, sid, flow: FlowSpec):
        path, _ = self.flow_path(flow)
        if sid in path:
            i = path.index(sid)
            return path[i - 1] if i > 0 else None
        return None

    def expected_path(self, src_host, dst) -> list:
        """Loop-free forwarding paths from ``src_host`` to a host or address."""
        hc = self.topo.host_configs[src_host]
        if isinstance(dst, str) and dst in self.topo.host_configs:
            dst_ip = self.topo.host_configs[dst].ip
        elif isinstance(dst, str) and dst in self.topo.configs:
            dst_ip = self.topo.configs[dst].loopback
        else:
            dst_ip = ip_int(dst)
        pkt = Packet(0, 0, hc.ip, dst_ip, Protocol.ICMP)
        path, outcome = self.walk(hc.switch, pkt)
        if outcome in ("delivered", "local"):
            return [path]
        return []

    def reachable(self, src_host, dst) -> bool:
        return bool(self.expected_path(src_host, dst))
