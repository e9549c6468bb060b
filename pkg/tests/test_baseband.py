import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crnsim import baseband as bb
from crnsim.transforms import MultCounter


def crandn(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


class TestGenerateCir:
    def test_zero_profile_gives_zero_taps(self, rng):
        cir = bb.generate_cir([0, 0, 0, 0], rng)
        assert np.array_equal(cir.taps, np.zeros(4))

    def test_tap_variances_follow_profile(self):
        profile = np.array([1, 0.5, 0.25, 0.125])
        rng = np.random.default_rng(7)
        draws = np.array([bb.generate_cir(profile, rng).taps for _ in range(100_000)])
        var = np.mean(np.abs(draws) ** 2, axis=0)
        assert np.all(np.abs(var / profile - 1) < 0.05)

    def test_same_seed_same_taps(self):
        a = bb.generate_cir(bb.exponential_profile(4), np.random.default_rng(3))
        b = bb.generate_cir(bb.exponential_profile(4), np.random.default_rng(3))
        assert np.array_equal(a.taps, b.taps)

    @pytest.mark.parametrize("bad", [[], [1, -0.1]])
    def test_bad_profile(self, bad, rng):
        with pytest.raises(ValueError):
            bb.generate_cir(bad, rng)

    def test_exponential_profile_normalised(self):
        p = bb.exponential_profile(4)
        assert p.sum() == pytest.approx(1.0)
        assert np.allclose(p[1:] / p[:-1], 0.5)


class TestCirToCtf:
    def test_impulse_is_flat(self):
        assert np.allclose(bb.cir_to_ctf(bb.Cir([1, 0, 0, 0]), 4), [1, 1, 1, 1])

    def test_delay_is_phase_ramp(self):
        assert np.allclose(bb.cir_to_ctf(bb.Cir([0, 1, 0, 0]), 4), [1, -1j, -1, 1j])

    def test_matches_direct_summation(self, rng):
        h = crandn(rng, 4)
        k = np.arange(64)[:, None]
        direct = (np.exp(-2j * np.pi * k * np.arange(4) / 64) * h).sum(axis=1)
        for pruned in (False, True):
            assert np.max(np.abs(bb.cir_to_ctf(h, 64, pruned=pruned) - direct)) < 1e-12

    def test_too_few_carriers(self):
        with pytest.raises(ValueError):
            bb.cir_to_ctf(np.ones(8), 4)

    @given(k0=st.integers(1, 31), log_k=st.integers(6, 8), seed=st.integers(0, 2**32 - 1))
    def test_pruned_agrees_and_is_cheaper(self, k0, log_k, seed):
        K = 2**log_k
        h = crandn(np.random.default_rng(seed), k0)
        full, pr = MultCounter(), MultCounter()
        a = bb.cir_to_ctf(h, K, full)
        b = bb.cir_to_ctf(h, K, pr, pruned=True)
        assert np.max(np.abs(a - b)) < 1e-12 * max(1.0, np.abs(h).sum())
        assert pr.complex_mults < full.complex_mults

    @given(k0=st.integers(1, 16), K=st.sampled_from([16, 20, 64, 100]), seed=st.integers(0, 2**32 - 1))
    def test_parseval(self, k0, K, seed):
        h = crandn(np.random.default_rng(seed), k0)
        H = bb.cir_to_ctf(h, K)
        assert np.sum(np.abs(H) ** 2) == pytest.approx(K * np.sum(np.abs(h) ** 2), rel=1e-9)

    @given(seed=st.integers(0, 2**32 - 1), a=st.complex_numbers(max_magnitude=10), b=st.complex_numbers(max_magnitude=10))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        h1, h2 = crandn(rng, 4), crandn(rng, 4)
        lhs = bb.cir_to_ctf(a * h1 + b * h2, 64, pruned=True)
        rhs = a * bb.cir_to_ctf(h1, 64) + b * bb.cir_to_ctf(h2, 64)
        assert np.allclose(lhs, rhs, rtol=0, atol=1e-9 * (1 + abs(a) + abs(b)) * 10)


class TestApplyChannel:
    def test_noiseless_ones_returns_ctf(self, rng):
        H = crandn(rng, 64)
        assert np.array_equal(bb.apply_channel(np.ones(64), H, 0.0), H)

    def test_sign_flip(self, rng):
        H = crandn(rng, 8)
        x = np.ones(8)
        x[3] = -1
        y = bb.apply_channel(x, H, 0.0)
        assert y[3] == -H[3]

    def test_noise_variance(self):
        rng = np.random.default_rng(11)
        H = crandn(rng, 100_000)
        x = bb.modulate(rng.integers(0, 2, 100_000), "bpsk")
        y = bb.apply_channel(x, H, 0.1, rng)
        assert abs(np.var(y - H * x) / 0.1 - 1) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bb.apply_channel(np.ones(4), np.ones(5), 0.0)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            bb.apply_channel(np.ones(4), np.ones(4), 0.1)


class TestModulation:
    def test_bpsk_mapping(self):
        assert np.array_equal(bb.modulate([0, 1, 1], "bpsk"), [1, -1, -1])

    def test_bpsk_decision(self):
        bits, sym = bb.demodulate_hard(np.array([0.9 - 0.1j]), "bpsk")
        assert bits[0] == 0 and sym[0] == 1

    @pytest.mark.parametrize("scheme", ["qam4", "qam16", "qam64"])
    def test_qam_round_trip(self, scheme, rng):
        nb = bb.constellation(scheme).bits_per_symbol
        bits = rng.integers(0, 2, 10_000 - 10_000 % nb)
        out, _ = bb.demodulate_hard(bb.modulate(bits, scheme), scheme)
        assert np.array_equal(out, bits)

    @pytest.mark.parametrize("scheme", bb.SCHEMES)
    def test_unit_energy(self, scheme):
        pts = bb.constellation(scheme).points
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)

    def test_gray_neighbours_differ_by_one_bit(self):
        const = bb.constellation("qam16")
        pts = const.points
        for i, p in enumerate(pts):
            d = np.abs(pts - p)
            nearest = np.flatnonzero(np.isclose(d, np.min(d[d > 0])))
            for j in nearest:
                assert bin(i ^ j).count("1") == 1

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            bb.modulate([0, 2], "bpsk")
        with pytest.raises(ValueError):
            bb.modulate([0, 1, 1], "qam4")
        with pytest.raises(ValueError):
            bb.constellation("psk8")


class TestEqualize:
    def test_perfect_csi(self, rng):
        H = crandn(rng, 64)
        x = bb.modulate(rng.integers(0, 2, 64), "bpsk")
        assert np.allclose(bb.equalize(H * x, H), x)

    def test_zero_estimate_gives_zero(self):
        assert bb.equalize(np.array([1 + 1j, 2.0]), np.array([0, 1.0]))[0] == 0

    def test_perturbation_bound(self, rng):
        H = crandn(rng, 64)
        x = bb.modulate(rng.integers(0, 2, 64), "bpsk")
        soft = bb.equalize(H * x, H * (1 + 1e-6))
        assert np.max(np.abs(soft - x) / np.abs(x)) < 1e-5

    def test_tiny_coefficient_clamped(self):
        out = bb.equalize(np.array([1e-12 + 0j]), np.array([1e-15j]))
        assert np.isfinite(out).all()
        assert abs(out[0]) == pytest.approx(1e-12 / bb.EQUALIZER_FLOOR)
