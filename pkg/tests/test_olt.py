import pytest
from hypothesis import given, strategies as st

from epon_hssr.core import NetworkConfig, bytes_to_duration, duration_to_bytes, ranging_window_length
from epon_hssr.olt import (
    OltTable,
    OnuRecord,
    RangingFailure,
    RangingPhase,
    RangingController,
    hssr_allocate,
    ss_allocate,
    ss_payload_bytes,
    ss_slot_sizes,
)
from epon_hssr.onu import GrantRequest, ProtocolError
from tests import oracles

NET = NetworkConfig()


def table(*be, hp=None, counters=None, net=NET):
    out = {}
    for i, b in enumerate(be):
        rec = OnuRecord(i, net.subscribed_hp_bytes_per_frame)
        rec.last_report = GrantRequest(i, (hp or [0] * len(be))[i], b)
        rec.counter = (counters or [0] * len(be))[i]
        out[i] = rec
    return out


def commit(tab, sched):
    for oid, c in sched.counters.items():
        tab[oid].counter = c


class TestHssrAllocate:
    def test_no_demand(self):
        tab = table(0, 0, 0, counters=[2, 0, 5])
        s = hssr_allocate(tab, NET, 0)
        assert len(s.steady_slots) == 3 and s.dynamic_grants == ()
        assert dict(s.counters) == {0: 2, 1: 0, 2: 5}
        s.check(NET)

    def test_steady_layout(self):
        s = hssr_allocate(table(0, 0), NET, 0)
        slot_ns = oracles.ceil_ns(2343 + 64, 10**9)
        assert [(x.offset, x.length_bytes) for x in s.steady_slots] == [(100, 2407), (200 + slot_ns, 2407)]

    def test_underload_two_grants(self):
        tab = table(1000, 2000, counters=[4, 1])
        s = hssr_allocate(tab, NET, 0)
        steady_end = s.steady_slots[-1].end
        g0, g1 = s.dynamic_grants
        assert (g0.onu_id, g0.length_bytes, g0.offset) == (0, 1000, steady_end + 100)
        assert (g1.onu_id, g1.length_bytes) == (1, 2000)
        assert g1.offset == g0.end + 100
        assert dict(s.counters) == {0: 0, 1: 0}
        assert s.total_guard_count == 4
        s.check(NET)

    def test_overload_round_robin_hand_trace(self):
        huge = 10**7
        tab = table(huge, huge, huge)
        winners = []
        for k in range(6):
            s = hssr_allocate(tab, NET, k)
            s.check(NET)
            assert len(s.dynamic_grants) == 1
            winners.append((s.dynamic_grants[0].onu_id, tuple(s.counters[i] for i in range(3))))
            commit(tab, s)
        assert winners[:3] == [(0, (0, 1, 1)), (1, (1, 0, 2)), (2, (2, 1, 0))]
        assert winners == oracles.overload_trace(3, 6)

    def test_overload_single_winner_gets_whole_dynamic_part(self):
        tab = table(10**7, 10**7)
        s = hssr_allocate(tab, NET, 0)
        (g,) = s.dynamic_grants
        steady_end = s.steady_slots[-1].end
        assert g.offset == steady_end + NET.guard_time
        assert g.length_bytes == duration_to_bytes(NET.frame_duration - steady_end - NET.guard_time, NET.line_rate_bps)

    def test_overload_fills_after_top_weight(self):
        # Work-conserving overload: ONUs are served in weight order, each up to
        # its backlog, until the dynamic part is used up.
        gt, rate = NET.guard_time, NET.line_rate_bps
        room = NET.frame_duration - NET.steady_part_end(3)
        d_bytes = duration_to_bytes(room - gt, rate)
        a = d_bytes * 6 // 10
        tab = table(a, a, 100, counters=[0, 1, 0])
        s = hssr_allocate(tab, NET, 0)
        got = {g.onu_id: g.length_bytes for g in s.dynamic_grants}
        # ONU 1 weighs 2a, ONU 0 weighs a, ONU 2 weighs 100.
        assert got[1] == a
        assert got[0] == duration_to_bytes(room - 2 * gt - bytes_to_duration(a, rate), rate)
        assert 2 not in got
        assert [g.onu_id for g in s.dynamic_grants] == [0, 1]
        assert dict(s.counters) == {0: 0, 1: 0, 2: 1}
        s.check(NET)

    def test_quiesced(self):
        tab = table(500, 0, 700, counters=[0, 3, 1])
        s = hssr_allocate(tab, NET, 0, quiesce=True)
        assert s.quiesced and s.dynamic_grants == ()
        assert dict(s.counters) == {0: 1, 1: 3, 2: 2}
        assert s.steady_slots == hssr_allocate(tab, NET, 0).steady_slots

    @given(
        be=st.lists(st.integers(0, 200_000), min_size=1, max_size=32),
        counters=st.lists(st.integers(0, 40), min_size=32, max_size=32),
        hp=st.lists(st.integers(0, 10**6), min_size=32, max_size=32),
        quiesce=st.booleans(),
    )
    def test_counter_law_and_accounting(self, be, counters, hp, quiesce):
        net = NetworkConfig(n_onus=len(be))
        tab = table(*be, hp=hp, counters=counters[: len(be)], net=net)
        s = hssr_allocate(tab, net, 0, quiesce=quiesce)
        s.check(net)
        granted = {g.onu_id for g in s.dynamic_grants}
        for i, rec in tab.items():
            if i in granted:
                assert s.counters[i] == 0
            elif rec.be_bytes > 0:
                assert s.counters[i] == rec.counter + 1
            else:
                assert s.counters[i] == rec.counter
            if i in granted:
                assert next(g for g in s.dynamic_grants if g.onu_id == i).length_bytes <= rec.be_bytes
        # Steady offsets depend on nothing but the population.
        assert s.steady_slots == hssr_allocate(table(*([0] * len(be)), net=net), net, 5).steady_slots

    @given(n=st.integers(2, 8), frames=st.integers(1, 30))
    def test_starvation_freedom(self, n, frames):
        tab = table(*([10**7] * n))
        last = {i: -1 for i in range(n)}
        for k in range(frames + n):
            s = hssr_allocate(tab, NET, k)
            for g in s.dynamic_grants:
                last[g.onu_id] = k
            commit(tab, s)
            if k >= n - 1:
                assert all(k - v < n for v in last.values())


class TestSsAllocate:
    def test_slot_sizes_examples(self):
        assert ss_slot_sizes([100, 300], 800) == [100, 300]
        assert ss_slot_sizes([100, 300], 200) == [50, 150]
        assert ss_slot_sizes([0, 0], 200) == [0, 0]

    def test_payload(self):
        # 16 guards of 100 ns plus one spare ns each, 16 reports
        assert ss_payload_bytes(16, NET) == duration_to_bytes(10**6 - 16 * 101, 10**9) - 16 * 64

    def test_idle_frame(self):
        s = ss_allocate(table(0, 0), NET, 0)
        assert [g.length_bytes for g in s.dynamic_grants] == [64, 64]
        assert s.steady_slots == () and dict(s.counters) == {}

    def test_offsets_follow_demand(self):
        a = ss_allocate(table(5000, 100), NET, 0)
        b = ss_allocate(table(100, 100), NET, 1)
        assert a.dynamic_grants[1].offset != b.dynamic_grants[1].offset

    def test_no_quiesce(self):
        with pytest.raises(ProtocolError):
            ss_allocate(table(1), NET, 0, quiesce=True)

    @given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 10**6)), min_size=1, max_size=32))
    def test_demand_cap_and_accounting(self, qs):
        net = NetworkConfig(n_onus=len(qs))
        tab = table(*[b for _, b in qs], hp=[h for h, _ in qs], net=net)
        s = ss_allocate(tab, net, 0)
        s.check(net)
        payload = [g.length_bytes - 64 for g in s.dynamic_grants]
        assert all(p <= h + b for p, (h, b) in zip(payload, qs))
        assert sum(payload) <= ss_payload_bytes(len(qs), net)


class TestTable:
    def test_register_overwrites_and_keeps_counter(self):
        t = OltTable()
        t.add(OnuRecord(0, 100, last_report=GrantRequest(0, 10, 0), counter=3))
        rec = t.register_report(GrantRequest(0, 0, 500))
        assert (rec.hp_bytes, rec.be_bytes, rec.counter) == (0, 500, 3)

    def test_unknown(self):
        with pytest.raises(ProtocolError):
            OltTable().register_report(GrantRequest(9, 0, 0))

    def test_unranged(self):
        t = OltTable()
        t.add(OnuRecord(0, 100, ranged=False))
        with pytest.raises(ProtocolError):
            t.register_report(GrantRequest(0, 0, 0))

    def test_duplicate(self):
        t = OltTable()
        t.add(OnuRecord(0, 100))
        with pytest.raises(ProtocolError):
            t.add(OnuRecord(0, 100))


class TestRanging:
    def plan(self, net=NET):
        steady_end = net.steady_part_end(16)
        return RangingController(net), steady_end

    def test_window_geometry(self):
        rc, steady_end = self.plan()
        p = rc.schedule_ranging(7, 7 * NET.frame_duration, steady_end)
        lo, hi = p.window
        assert hi - lo == ranging_window_length(NET) == 180_000 + 512
        assert lo == 7 * NET.frame_duration + steady_end + NET.guard_time
        assert lo - p.token_time == 2 * NET.propagation(2)
        assert hi <= 8 * NET.frame_duration - NET.guard_time
        assert rc.phase is RangingPhase.TOKEN_SENT

    def test_reply_at_2km_is_earliest_edge(self):
        rc, steady_end = self.plan()
        p = rc.schedule_ranging(0, 0, steady_end)
        assert rc.complete_ranging(p.token_time + 20_000, 16) == 20_000
        assert p.token_time + 20_000 == p.window[0]

    def test_reply_at_11km(self):
        rc, steady_end = self.plan()
        p = rc.schedule_ranging(0, 0, steady_end)
        arrival = p.token_time + 110_000
        assert p.window[0] < arrival < p.window[1]
        assert rc.complete_ranging(arrival) == 110_000

    def test_offset_at_10km_with_turnaround(self):
        net = NetworkConfig(ranging_turnaround=1_000)
        rc, steady_end = self.plan(net)
        p = rc.schedule_ranging(0, 0, steady_end)
        assert rc.complete_ranging(p.token_time + 100_000 + 1_000) == 100_000
        assert rc.phase is RangingPhase.COMPLETED

    def test_late_reply_fails(self):
        rc, steady_end = self.plan()
        p = rc.schedule_ranging(0, 0, steady_end)
        with pytest.raises(RangingFailure):
            rc.complete_ranging(p.window[1])
        assert rc.failures == 1 and rc.measured_rtt is None

    def test_no_token(self):
        with pytest.raises(RangingFailure):
            RangingController(NET).complete_ranging(5)

    def test_frame_too_small(self):
        net = NetworkConfig(subscribed_hp_bps_per_onu=52_000_000)
        rc = RangingController(net)
        with pytest.raises(RangingFailure, match="frame too small"):
            rc.schedule_ranging(0, 0, net.steady_part_end(16))
