"""Programmatic topology construction: the reference network and random ones."""
from __future__ import annotations

import numpy as np

from .netmodel import ip_str, load_topology

LOOPBACK_BASE = 0x0AFF0000  # 10.255.0.0
LINK_BASE = 0xAC100000  # 172.16.0.0


def build_document(asn_of: dict, links: list, hosts: list, own_only=(), policies=None) -> str:
    """Emit a topology document.

    ``asn_of`` maps switch id to AS (insertion order is switch order), ``links``
    is a list of switch pairs, ``hosts`` a list of (host id, switch id, diag).
    ``own_only`` holds (switch, peer) sessions whose export scope is limited to
    routes originated inside the switch's own AS.  ``policies`` may map
    (switch, peer) to explicit (policy-in, policy-out) strings.
    """
    switches = list(asn_of)
    index = {s: i for i, s in enumerate(switches)}
    next_port = {s: 1 for s in switches}
    own_only = set(own_only)
    policies = policies or {}

    host_lines, originate = [], []
    for hid, sid, diag in hosts:
        port = next_port[sid]
        next_port[sid] += 1
        net = (10 << 24) | (asn_of[sid] << 16) | (index[sid] << 8)
        line = f"{hid} {sid}:{port} {ip_str(net + 10)}/24 {ip_str(net + 1)}"
        if diag:
            line += f" sip={ip_str(net + 11)} diag"
        host_lines.append(line)
        originate.append(f"{sid} {ip_str(net)}/24")

    link_lines, bgp_lines = [], []
    for k, (a, b) in enumerate(links):
        pa, pb = next_port[a], next_port[b]
        next_port[a] += 1
        next_port[b] += 1
        base = LINK_BASE + 2 * k
        link_lines.append(f"L{k} {a}:{pa} {ip_str(base)}/31 {b}:{pb} {ip_str(base + 1)}/31")
        for x, y in ((a, b), (b, a)):
            pin, pout = policies.get((x, y), ("all", "own" if (x, y) in own_only else "all"))
            bgp_lines.append(f"{x} {y} {pin} {pout}")

    sw_lines = [f"{s} {asn_of[s]} {ip_str(LOOPBACK_BASE + index[s])} {next_port[s]}" for s in switches]
    originate = [f"{s} {ip_str(LOOPBACK_BASE + index[s])}/32" for s in switches] + originate
    parts = ["[switches]", "# id asn loopback ports", *sw_lines,
             "[hosts]", *host_lines,
             "[links]", *link_lines,
             "[bgp]", *bgp_lines,
             "[acl]",
             "[originate]", *originate,
             "[static]"]
    return "\n".join(parts) + "\n"


REFERENCE_ASES = {
    1: ["S0", "S1", "S2"],
    2: ["S3", "S4", "S5", "S6"],
    3: ["S7", "S8", "S9", "S10", "S11"],
    4: ["S12", "S13", "S14", "S15"],
    5: ["S16", "S17", "S18", "S19"],
}

REFERENCE_LINKS = [
    # AS1
    ("S0", "S1"), ("S1", "S2"), ("S0", "S2"),
    # AS2
    ("S3", "S4"), ("S4", "S5"), ("S5", "S6"), ("S3", "S6"),
    # AS3
    ("S7", "S8"), ("S8", "S9"), ("S9", "S10"), ("S10", "S11"), ("S7", "S11"),
    # AS4
    ("S12", "S13"), ("S13", "S14"), ("S14", "S15"), ("S12", "S15"),
    # AS5
    ("S16", "S17"), ("S17", "S19"), ("S16", "S18"), ("S18", "S19"),
    # inter-AS
    ("S2", "S4"), ("S0", "S18"), ("S3", "S16"), ("S10", "S17"),
    ("S5", "S7"), ("S6", "S12"), ("S9", "S13"), ("S11", "S14"),
]

REFERENCE_HOSTS = [
    ("H0", "S0", True), ("H1", "S2", False), ("H2", "S5", False), ("H3", "S8", False),
    ("H4", "S11", False), ("H5", "S14", False), ("H6", "S16", False), ("H7", "S19", False),
    ("H8", "S6", False),
]

# AS1 and AS2 only export their own routes toward AS5, so AS5 reaches AS3/AS4
# solely across S10-S17.
REFERENCE_OWN_ONLY = [("S0", "S18"), ("S3", "S16")]


def reference_document() -> str:
    asn_of = {s: asn for asn, members in REFERENCE_ASES.items() for s in members}
    asn_of = dict(sorted(asn_of.items(), key=lambda kv: int(kv[0][1:])))
    return build_document(asn_of, REFERENCE_LINKS, REFERENCE_HOSTS, REFERENCE_OWN_ONLY)


def random_document(seed: int, n_as=(3, 6), n_switches=(8, 24), extra_link_p=0.25) -> str:
    """Random connected multi-AS topology with one host per AS."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(n_as[0], n_as[1] + 1))
    n = int(rng.integers(max(n_switches[0], k), n_switches[1] + 1))
    # every AS gets at least one switch
    owners = list(range(k)) + [int(x) for x in rng.integers(0, k, n - k)]
    rng.shuffle(owners)
    owners = sorted(owners)
    switches = [f"S{i}" for i in range(n)]
    asn_of = {s: owners[i] + 1 for i, s in enumerate(switches)}
    members = {a: [s for s in switches if asn_of[s] == a] for a in range(1, k + 1)}
    links = set()

    def add(a, b):
        if a != b:
            links.add(tuple(sorted((a, b), key=lambda s: int(s[1:]))))

    for group in members.values():
        for i in range(1, len(group)):
            add(group[i], group[int(rng.integers(0, i))])
        for i in range(len(group)):
            for j in range(i + 2, len(group)):
                if rng.random() < extra_link_p / 2:
                    add(group[i], group[j])
    ases = list(members)
    for i in range(1, len(ases)):
        a = ases[i]
        b = ases[int(rng.integers(0, i))]
        add(rng.choice(members[a]), rng.choice(members[b]))
    for _ in range(int(rng.integers(0, k + 1))):
        a, b = rng.choice(ases, 2, replace=False)
        add(rng.choice(members[a]), rng.choice(members[b]))
    links = sorted(links, key=lambda l: (int(l[0][1:]), int(l[1][1:])))
    hosts = []
    for i, a in enumerate(ases):
        hosts.append((f"H{i}", str(rng.choice(members[a])), i == 0))
    own_only = []
    for a, b in links:
        if asn_of[a] != asn_of[b]:
            if rng.random() < 0.25:
                own_only.append((a, b))
            if rng.random() < 0.25:
                own_only.append((b, a))
    return build_document(asn_of, links, hosts, own_only)


def random_topology(seed: int, **kw):
    return load_topology(random_document(seed, **kw))
