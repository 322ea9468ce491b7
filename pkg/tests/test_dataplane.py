import pytest
from hypothesis import given, settings, strategies as st

from netdx.dataplane import (
    DataPlane, Drop, DropReason, Fib, Forward, ToCpu, TriggerConfig, WindowNotClosed, WindowedCounter,
    acl_eval, check_fault_trigger, header_bytes, internet_checksum, seal, verify_header,
)
from netdx.netmodel import Action, AclRule, FibEntry, FlowSpec, Packet, Prefix, Protocol, ip_int


def rfc1071(data: bytes) -> int:
    """Reference checksum computed 32 bits at a time with end-around carry."""
    if len(data) % 2:
        data += b"\0"
    acc = 0
    for i in range(0, len(data), 2):
        acc += (data[i] << 8) | data[i + 1]
    acc = (acc >> 16) + (acc & 0xFFFF)
    acc += acc >> 16
    return ~acc & 0xFFFF


def test_checksum_reference_vector():
    hdr = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    assert rfc1071(hdr) == 0xB861
    assert internet_checksum(hdr) == 0xB861
    sealed = hdr[:10] + bytes.fromhex("b861") + hdr[12:]
    assert internet_checksum(sealed) == 0


@given(st.binary(max_size=64))
def test_checksum_matches_reference(data):
    assert internet_checksum(data) == rfc1071(data)


def pkt(dst="10.3.8.10", src="10.1.0.10", proto=Protocol.UDP, ttl=64, dport=33434):
    return seal(Packet(0, 0, ip_int(src), ip_int(dst), proto, ttl=ttl, dst_port=dport))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 255), st.integers(0, 0xFFFF))
def test_sealed_header_verifies(src, dst, ttl, ident):
    p = seal(Packet(0, 0, src, dst, Protocol.TCP, ttl=ttl, ident=ident))
    assert verify_header(p) == 0
    assert len(header_bytes(p)) == 20
    p.src_ip ^= 1
    assert verify_header(p) != 0


def brute_lpm(entries, dst):
    best = None
    for e in entries:
        n = e.prefix.length
        if n == 0 or (dst >> (32 - n)) == (e.prefix.network >> (32 - n)):
            if best is None or n > best.prefix.length:
                best = e
    return best


fib_entries = st.lists(st.builds(lambda a, n, i: FibEntry(Prefix.covering(a, n), i, 0, "bgp"),
                                 st.integers(0, 2**32 - 1), st.integers(0, 32), st.integers(1, 8)),
                       max_size=30)


@given(fib_entries, st.lists(st.integers(0, 2**32 - 1), max_size=20))
def test_lpm_matches_brute_force(entries, dsts):
    fib = Fib()
    dedup = {}
    for e in entries:
        fib.install(e)
        dedup[e.prefix] = e
    for e in entries:
        # probe addresses inside each prefix too
        dsts = dsts + [e.prefix.network]
    for d in dsts:
        assert fib.lookup(d) == brute_lpm(dedup.values(), d)


def test_fib_remove_and_len():
    fib = Fib([FibEntry(Prefix.parse("10.0.0.0/8"), 1, 0, "bgp"),
               FibEntry(Prefix.parse("10.3.0.0/16"), 2, 0, "bgp")])
    assert len(fib) == 2
    assert fib.lookup(ip_int("10.3.1.1")).egress_if == 2
    fib.remove(Prefix.parse("10.3.0.0/16"))
    assert fib.lookup(ip_int("10.3.1.1")).egress_if == 1
    assert fib.remove(Prefix.parse("10.3.0.0/16")) is None


def test_acl_first_match_and_default_permit():
    rules = [AclRule(FlowSpec.parse("dst=10.3.0.0/16,proto=TCP"), Action.PERMIT),
             AclRule(FlowSpec.parse("dst=10.3.0.0/16"), Action.DENY)]
    assert acl_eval(rules, pkt(proto=Protocol.TCP)) is Action.PERMIT
    assert acl_eval(rules, pkt()) is Action.DENY
    assert acl_eval(rules, pkt(dst="10.4.0.1")) is Action.PERMIT
    assert acl_eval([], pkt()) is Action.PERMIT


def make_dp(**trigger):
    dp = DataPlane([1, 2], {ip_int("10.255.0.1")}, TriggerConfig(**trigger))
    dp.fib.install(FibEntry(Prefix.parse("10.3.0.0/16"), 2, 0, "bgp"))
    return dp


def test_decision_precedence():
    dp = make_dp()
    bad = pkt()
    bad.dst_ip ^= 0x100
    assert dp.decide(bad) == Drop(DropReason.BAD_CHECKSUM)
    dp.acl = [AclRule(FlowSpec.parse("dst=10.3.8.0/24"), Action.DENY)]
    assert dp.decide(pkt(ttl=0)) == Drop(DropReason.ACL_DENY)
    dp.acl = []
    # local delivery is exempt from the TTL check
    assert isinstance(dp.decide(pkt(dst="10.255.0.1", ttl=0)), ToCpu)
    assert dp.decide(pkt(ttl=0)) == Drop(DropReason.ZERO_TTL)
    assert dp.decide(pkt(dst="10.9.0.1")) == Drop(DropReason.NO_FIB)
    assert dp.decide(pkt()) == Forward(2)


def test_windowed_counter_rolls():
    c = WindowedCounter(100)
    c.add(10)
    c.add(150, 2)
    assert (c.get(0), c.get(1)) == (1, 2)
    c.add(250)
    assert c.get(0) is None and c.get(1) == 2 and c.get(2) == 1
    c.add(900)
    assert c.get(8) == 0 and c.get(9) == 1 and c.total == 5


@pytest.mark.parametrize("arrived, dropped, expect", [
    (4, 4, False), (5, 1, True), (10, 1, False), (10, 2, True), (100, 19, False)])
def test_trigger_threshold(arrived, dropped, expect):
    assert check_fault_trigger(arrived, dropped, TriggerConfig()) is expect


def test_trigger_suppressed():
    assert not check_fault_trigger(10, 10, TriggerConfig(suppress=True))
    with pytest.raises(ValueError):
        TriggerConfig(drop_ratio_threshold=0)


def test_trigger_fires_on_nofib_burst():
    dp = make_dp()
    dp.trace_filter = FlowSpec.parse("*")
    fired = [dp.ingress(pkt(dst="10.9.0.1"), 1, 1000 + i)[1] for i in range(6)]
    assert fired == [False] * 4 + [True, True]


def run_window(dp, n_forward, n_drop, n_local, silent, t0=0):
    t = t0
    for i in range(n_forward + n_drop + n_local):
        if i < n_forward:
            p = pkt()
        elif i < n_forward + n_drop:
            p = pkt(dst="10.9.0.1")
        else:
            p = pkt(dst="10.255.0.1")
        d, _ = dp.ingress(p, 1, t)
        if isinstance(d, Forward):
            if i < silent:
                dp.discard(p)
            else:
                dp.egress(p, d.egress_if, t + 5)
        t += 10


@settings(max_examples=50)
@given(st.integers(0, 40), st.integers(0, 10), st.integers(0, 10), st.data())
def test_conservation(n_forward, n_drop, n_local, data):
    silent = data.draw(st.integers(0, n_forward))
    dp = make_dp(min_traced_per_window=1000)
    dp.trace_filter = FlowSpec.parse("*")
    run_window(dp, n_forward, n_drop, n_local, silent)
    with pytest.raises(WindowNotClosed):
        dp.silent_drop_check(0, 1000)
    rep = dp.silent_drop_check(0, dp.window + 1)
    assert rep.ingress_sum == n_forward + n_drop + n_local
    assert rep.deliberate == n_drop + n_local
    assert rep.deficit == silent


def test_window_crossing_egress_counts_in_ingress_window():
    dp = make_dp()
    dp.trace_filter = FlowSpec.parse("*")
    p = pkt()
    t = dp.window - 2
    d, _ = dp.ingress(p, 1, t)
    dp.egress(p, d.egress_if, t + 5)
    rep = dp.silent_drop_check(0, dp.window + 1)
    assert rep.deficit == 0 and rep.egress_sum == 1
    assert dp.silent_drop_check(1, 2 * dp.window).ingress_sum == 0


def test_untraced_packets_not_counted():
    dp = make_dp()
    d, _ = dp.ingress(pkt(), 1, 0)
    assert dp.silent_drop_check(0, dp.window).ingress_sum == 0
    dp.trace_filter = FlowSpec.parse("proto=TCP")
    dp.ingress(pkt(), 1, 0)
    dp.ingress(pkt(proto=Protocol.TCP), 1, 0)
    assert dp.ports[1].ingress.total == 1
