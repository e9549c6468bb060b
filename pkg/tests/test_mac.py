import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crnsim import mac
from crnsim.mac import Occupancy as Occ


def table(n=3, rate=6e6, pkt=8000, u_t=0.0):
    return mac.ChannelStateTable(mac.ChannelRecord(c, rate, pkt, u_t=u_t) for c in range(n))


class TestCst:
    def test_su_timer(self):
        t = mac.ChannelStateTable([mac.ChannelRecord(0, 6e6, 9600)])
        mac.update_cst(t, {0: Occ.SU}, 0.0)
        assert t[0].release_timer(0.0) == pytest.approx(1.6e-3)

    def test_busy_rescan_keeps_timer(self):
        t = table(1)
        mac.update_cst(t, {0: Occ.SU}, 0.0)
        end = t[0].release_at
        mac.update_cst(t, {0: Occ.SU}, 1e-3)
        assert t[0].release_at == end

    def test_pu_has_no_timer(self):
        t = table(1)
        mac.update_cst(t, {0: Occ.PU}, 0.0)
        assert t[0].status == "busy" and t[0].release_timer(0.0) is None

    def test_busy_to_free_clears(self):
        t = table(1)
        mac.update_cst(t, {0: Occ.PU}, 0.0)
        mac.update_cst(t, {0: Occ.FREE}, 1.0)
        assert t[0].is_free(1.0) and t[0].release_at is None

    def test_snapshot_must_cover_table(self):
        with pytest.raises(ValueError):
            mac.update_cst(table(2), {0: Occ.FREE}, 0.0)

    @given(duration=st.floats(1e-6, 10.0), start=st.floats(0.0, 100.0))
    def test_timer_expires_exactly(self, duration, start):
        t = table(1)
        t.reserve(0, duration, start)
        end = t[0].release_at
        assert not t[0].is_free(np.nextafter(end, -np.inf))
        assert t[0].is_free(end)


class TestScoring:
    def test_ewma(self):
        assert mac.ewma_utilization(0.4, 0.2, 0.5) == pytest.approx(0.3)
        assert mac.ewma_utilization(0.4, 0.2, 1.0) == 0.4
        assert mac.ewma_utilization(0.4, 0.2, 0.0) == 0.2
        with pytest.raises(ValueError):
            mac.ewma_utilization(1.2, 0.2, 0.5)

    def test_slot_count_examples(self):
        assert mac.slot_count(0.1, 0.3, 20) == 3
        assert mac.slot_count(0.0, 0.3, 20) == 20
        assert mac.slot_count(1.0, 0.3, 20) == 0

    @given(u=st.floats(0.0, 1.0), thr=st.floats(1e-6, 1 - 1e-6, exclude_min=True), cap=st.integers(0, 60))
    def test_slot_count_matches_bruteforce(self, u, thr, cap):
        assert mac.slot_count(u, thr, cap) == mac.slot_count_bruteforce(u, thr, cap)

    def test_pkt_num_canonical(self):
        rec = mac.ChannelRecord(0, 6e6, 8000)
        assert mac.pkt_num(rec, 3, mac.CetpParams()) == 2
        assert mac.pkt_num(rec, 0, mac.CetpParams()) == 0

    def test_pkt_num_literal(self):
        rec = mac.ChannelRecord(0, 6e6, 600)
        assert mac.pkt_num(rec, 10, mac.CetpParams(lc=1200, mode="literal")) == 8

    def test_bad_params(self):
        with pytest.raises(ValueError):
            mac.CetpParams(mode="other")
        with pytest.raises(ValueError):
            mac.CetpParams(beta=0)


class TestSelection:
    rng = np.random.default_rng(0)

    def test_max_min(self):
        sel = mac.select_channel([mac.Candidate(1, 5, 3, 1e6), mac.Candidate(2, 4, 4, 1e6)], self.rng)
        assert (sel.channel, sel.max_pkt_num) == (2, 4)

    def test_rate_tie_break(self):
        sel = mac.select_channel([mac.Candidate(1, 3, 3, 1e6), mac.Candidate(2, 3, 3, 2e6)], self.rng)
        assert sel.channel == 2

    def test_zero_is_silence(self):
        assert mac.select_channel([mac.Candidate(1, 0, 5, 1e6)], self.rng) is None
        assert mac.select_channel([], self.rng) is None

    def test_random_ties_are_seeded(self):
        cands = [mac.Candidate(c, 3, 3, 1e6) for c in range(6)]
        a = [mac.select_channel(cands, np.random.default_rng(4)).channel for _ in range(3)]
        b = [mac.select_channel(cands, np.random.default_rng(4)).channel for _ in range(3)]
        assert a == b

    @given(
        rows=st.lists(
            st.tuples(st.integers(0, 50), st.integers(0, 50), st.sampled_from([3e6, 6e6, 12e6])),
            min_size=1,
            max_size=8,
        ),
        scale=st.integers(2, 9),
    )
    def test_scale_invariance(self, rows, scale):
        cands = [mac.Candidate(i, a, b, r) for i, (a, b, r) in enumerate(rows)]
        scaled = [mac.Candidate(c.channel, c.pkt_tran * scale, c.pkt_recv * scale, c.rate) for c in cands]
        a = mac.select_channel(cands, np.random.default_rng(1))
        b = mac.select_channel(scaled, np.random.default_rng(1))
        assert (a is None) == (b is None)
        if a is not None:
            assert a.channel == b.channel and b.max_pkt_num == scale * a.max_pkt_num

    def test_backup_runner_up(self):
        cands = [mac.Candidate(1, 5, 5, 1e6), mac.Candidate(2, 3, 3, 1e6)]
        assert mac.reserve_backup(cands, 1) == 2
        assert mac.reserve_backup(cands[:1], 1) is None


class TestSecurity:
    reg = mac.CredentialRegistry(b"secret")

    def setup_method(self):
        self.reg.enroll(1)

    def test_valid_and_expired(self):
        cred = self.reg.issue(1, 5.0)
        assert mac.authenticate(1, cred, self.reg, 5.0)
        assert not mac.authenticate(1, cred, self.reg, 5.0001)

    def test_forged_and_foreign(self):
        cred = self.reg.issue(1, 5.0)
        assert not mac.authenticate(1, mac.Credential(1, b"x" * 32, 5.0), self.reg, 0.0)
        assert not mac.authenticate(2, cred, self.reg, 0.0)
        other = mac.CredentialRegistry(b"other")
        other.enroll(1)
        assert not mac.authenticate(1, cred, other, 0.0)

    def test_revoked(self):
        reg = mac.CredentialRegistry(b"s")
        reg.enroll(3)
        cred = reg.issue(3, 1.0)
        reg.revoke(3)
        assert not mac.authenticate(3, cred, reg, 0.0)
        with pytest.raises(KeyError):
            reg.issue(3, 1.0)

    def test_switch_pattern(self):
        a = mac.derive_switch_pattern(b"k", 10, 7)
        assert a == mac.derive_switch_pattern(b"k", 10, 7)
        assert sorted(a) == list(range(10))
        assert a != mac.derive_switch_pattern(b"k2", 10, 7)


def handshake_pair(n=3, free_b=None):
    reg = mac.CredentialRegistry(b"net")
    for i in (0, 1, 2):
        reg.enroll(i)
    params = mac.CetpParams()
    a = mac.MacNode(0, table(n), params, reg.issue(0, 10.0))
    b = mac.MacNode(1, table(n), params, reg.issue(1, 10.0))
    return reg, a, b


class TestHandshake:
    def test_happy_path(self):
        reg, a, b = handshake_pair(1)
        snap = {0: Occ.FREE}
        rts = a.on_link_request(0.0, 1, snap)
        cts = b.on_rts(0.0, rts, snap, reg, np.random.default_rng(0))
        crts = a.on_cts(0.0, cts, snap)
        b.on_crts(0.0, crts)
        assert a.state is b.state is mac.LinkState.TRANSMITTING
        assert a.channel == b.channel == 0
        assert cts.backup is None

    def test_no_overlap_silence_then_timeout(self):
        reg, a, b = handshake_pair(2)
        rts = a.on_link_request(0.0, 1, {0: Occ.FREE, 1: Occ.PU})
        cts = b.on_rts(0.0, rts, {0: Occ.PU, 1: Occ.FREE}, reg, np.random.default_rng(0))
        assert cts is None and b.state is mac.LinkState.IDLE
        assert a.on_cts_timeout(1.0) and a.state is mac.LinkState.IDLE

    def test_neighbour_books_channel(self):
        reg, a, b = handshake_pair(1)
        c = mac.MacNode(2, table(1), mac.CetpParams(), reg.issue(2, 10.0))
        crts = mac.ControlMessage("CRTS", 0, 1, channel=0, max_pkt_num=2, duration=2 * 8000 / 6e6)
        c.on_crts(0.0, crts)
        assert c.table[0].release_timer(0.0) == pytest.approx(2 * 8000 / 6e6)

    def test_crts_duration_from_grant(self):
        reg, a, b = handshake_pair(1)
        a.table[0].u_t = 0.1
        b.table[0].u_t = 0.1
        snap = {0: Occ.FREE}
        rts = a.on_link_request(0.0, 1, snap)
        cts = b.on_rts(0.0, rts, snap, reg, np.random.default_rng(0))
        crts = a.on_cts(0.0, cts, snap)
        assert cts.max_pkt_num == 2
        assert crts.duration == pytest.approx(2 * 8000 / 6e6)

    def test_unauthenticated_rts_rejected(self):
        reg, a, b = handshake_pair(1)
        rogue = mac.ControlMessage("RTS", 9, 1, (0,), (5,), credential=mac.Credential(9, b"0" * 32, 10.0))
        assert b.on_rts(0.0, rogue, {0: Occ.FREE}, reg, np.random.default_rng(0)) is None
        assert b.auth_rejections == 1 and b.state is mac.LinkState.IDLE

    def test_expired_credential_gets_no_grant(self):
        reg, a, b = handshake_pair(1)
        rts = a.on_link_request(20.0, 1, {0: Occ.FREE})
        assert b.on_rts(20.0, rts, {0: Occ.FREE}, reg, np.random.default_rng(0)) is None

    def test_cts_abort_when_channel_taken(self):
        reg, a, b = handshake_pair(1)
        rts = a.on_link_request(0.0, 1, {0: Occ.FREE})
        cts = b.on_rts(0.0, rts, {0: Occ.FREE}, reg, np.random.default_rng(0))
        assert a.on_cts(1e-4, cts, {0: Occ.PU}) is None
        assert a.state is mac.LinkState.IDLE

    def test_out_of_order_ignored(self):
        reg, a, b = handshake_pair(1)
        cts = mac.ControlMessage("CTS", 1, 0, channel=0, max_pkt_num=1)
        assert a.on_cts(0.0, cts, {0: Occ.FREE}) is None
        assert a.ignored == 1

    def test_zero_packet_cts_impossible(self):
        with pytest.raises(ValueError):
            mac.ControlMessage("CTS", 1, 0, channel=0, max_pkt_num=0)
