"""Discrete baseband OFDM model.

One OFDM symbol is a length-K vector of subcarrier symbols.  The channel is a
sample-spaced impulse response with K0 taps; its transfer function on the
K subcarriers is the zero-padded K-point DFT of the taps, and the received
symbol on carrier k is ``y[k] = H[k] * x[k] + w[k]``.

CTFs and symbol grids are plain complex numpy vectors.  Only the impulse
response carries extra structure (its prior tap variances), so it gets a
small container class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .transforms import MultCounter, dft, pruned_dft

EQUALIZER_FLOOR = 1e-9

SCHEMES = ("bpsk", "qam4", "qam16", "qam64")


@dataclass(frozen=True, eq=False)
class Cir:
    """Sample-spaced channel impulse response.

    Attributes
    ----------
    taps : complex ndarray, shape (K0,)
    profile : float ndarray, shape (K0,)
        Per-tap prior variances.  Estimates that carry no prior get ones.
    """

    taps: np.ndarray
    profile: np.ndarray = field(default=None)

    def __post_init__(self):
        taps = np.atleast_1d(np.asarray(self.taps, dtype=complex))
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("CIR needs at least one tap")
        profile = np.ones(taps.size) if self.profile is None else np.asarray(self.profile, float)
        if profile.shape != taps.shape:
            raise ValueError("taps and profile must have the same length")
        if np.any(profile < 0) or not np.any(profile > 0):
            raise ValueError("profile must be non-negative with at least one positive entry")
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "profile", profile)

    @property
    def n_taps(self) -> int:
        return self.taps.size


def exponential_profile(n_taps: int) -> np.ndarray:
    """Tap variances decaying by 2 per tap, normalised to unit total power."""
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    p = 2.0 ** -np.arange(n_taps)
    return p / p.sum()


def complex_normal(rng: np.random.Generator, size, variance=1.0) -> np.ndarray:
    """Circular complex Gaussian samples with the given variance."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def generate_cir(profile, rng: np.random.Generator) -> Cir:
    """Draw one block-fading Rayleigh CIR with independent taps."""
    profile = np.asarray(profile, dtype=float)
    if profile.ndim != 1 or profile.size == 0:
        raise ValueError("profile must be a non-empty vector")
    if np.any(profile < 0):
        raise ValueError("profile entries must be >= 0")
    taps = complex_normal(rng, profile.size, profile)
    if not np.any(profile > 0):
        # all-zero prior: valid draw, but Cir needs a positive prior entry
        return Cir(taps, np.ones(profile.size))
    return Cir(taps, profile)


def cir_to_ctf(
    cir: Cir | np.ndarray,
    n_carriers: int,
    counter: MultCounter | None = None,
    pruned: bool = False,
) -> np.ndarray:
    """Transfer function of ``cir`` on ``n_carriers`` subcarriers.

    ``pruned=False`` runs a zero-padded full FFT; ``pruned=True`` runs the
    input-pruned kernel that only touches the live taps.  Both return
    H[k] = sum_l exp(-2j*pi*k*l/K) * h[l].
    """
    taps = cir.taps if isinstance(cir, Cir) else np.asarray(cir, dtype=complex)
    if n_carriers < taps.size:
        raise ValueError(f"K={n_carriers} is smaller than the CIR length {taps.size}")
    if pruned:
        return pruned_dft(taps, n_carriers, counter)
    padded = np.zeros(n_carriers, dtype=complex)
    padded[: taps.size] = taps
    return dft(padded, counter)


def apply_channel(x, ctf, sigma_w_sq: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """y = H * x + w with circular Gaussian w of variance ``sigma_w_sq``."""
    x = np.asarray(x, dtype=complex)
    ctf = np.asarray(ctf, dtype=complex)
    if x.shape != ctf.shape:
        raise ValueError(f"symbol grid {x.shape} and CTF {ctf.shape} differ in length")
    if sigma_w_sq < 0:
        raise ValueError("noise variance must be >= 0")
    y = ctf * x
    if sigma_w_sq > 0:
        if rng is None:
            raise ValueError("a generator is required when sigma_w_sq > 0")
        y = y + complex_normal(rng, x.shape, sigma_w_sq)
    return y


# --------------------------------------------------------------------------
# constellations


@dataclass(frozen=True, eq=False)
class Constellation:
    name: str
    bits_per_symbol: int
    levels: np.ndarray  # per-axis amplitudes indexed by Gray-decoded integer (QAM only)
    scale: float

    @property
    def points(self) -> np.ndarray:
        """All constellation points, indexed by the integer the bits encode."""
        idx = np.arange(2**self.bits_per_symbol)
        bits = ((idx[:, None] >> np.arange(self.bits_per_symbol)[::-1]) & 1).astype(np.uint8)
        return modulate(bits.ravel(), self.name)


def _gray_to_binary(g: np.ndarray) -> np.ndarray:
    b = g.copy()
    shift = g >> 1
    while np.any(shift):
        b ^= shift
        shift >>= 1
    return b


@lru_cache(maxsize=None)
def constellation(scheme: str) -> Constellation:
    scheme = scheme.lower()
    if scheme == "bpsk":
        return Constellation("bpsk", 1, np.array([1.0, -1.0]), 1.0)
    if scheme in ("qam4", "qam16", "qam64"):
        m = int(scheme[3:])
        side = int(round(np.sqrt(m)))
        levels = 2.0 * np.arange(side) - (side - 1)
        return Constellation(scheme, int(np.log2(m)), levels, np.sqrt(2.0 * (m - 1) / 3.0))
    raise ValueError(f"unsupported modulation scheme {scheme!r}; expected one of {SCHEMES}")


def _bits_to_ints(bits: np.ndarray, width: int) -> np.ndarray:
    weights = 1 << np.arange(width)[::-1]
    return bits.reshape(-1, width) @ weights


def _ints_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    return ((values[:, None] >> np.arange(width)[::-1]) & 1).astype(np.uint8).ravel()


def modulate(bits, scheme: str) -> np.ndarray:
    """Map bits to unit-average-energy symbols (BPSK: 0 -> +1, 1 -> -1)."""
    const = constellation(scheme)
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    nb = const.bits_per_symbol
    if bits.size % nb:
        raise ValueError(f"{bits.size} bits is not a multiple of {nb} for {const.name}")
    if const.name == "bpsk":
        return (1.0 - 2.0 * bits).astype(complex)
    half = nb // 2
    groups = bits.reshape(-1, 2, half)
    i_idx = _gray_to_binary(_bits_to_ints(groups[:, 0, :], half))
    q_idx = _gray_to_binary(_bits_to_ints(groups[:, 1, :], half))
    return (const.levels[i_idx] + 1j * const.levels[q_idx]) / const.scale


def demodulate_hard(soft, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point decisions: returns (bits, decided symbols)."""
    const = constellation(scheme)
    soft = np.asarray(soft, dtype=complex).ravel()
    if const.name == "bpsk":
        bits = (soft.real < 0).astype(np.uint8)
        return bits, (1.0 - 2.0 * bits).astype(complex)
    side = const.levels.size
    half = const.bits_per_symbol // 2

    def axis(v):
        idx = np.clip(np.rint((v * const.scale + (side - 1)) / 2.0), 0, side - 1).astype(np.int64)
        gray = idx ^ (idx >> 1)
        return idx, _ints_to_bits(gray, half).reshape(-1, half)

    i_idx, i_bits = axis(soft.real)
    q_idx, q_bits = axis(soft.imag)
    bits = np.concatenate([i_bits, q_bits], axis=1).ravel()
    symbols = (const.levels[i_idx] + 1j * const.levels[q_idx]) / const.scale
    return bits, symbols


def equalize(y, ctf_estimate, floor: float = EQUALIZER_FLOOR) -> np.ndarray:
    """One-tap zero-forcing equaliser.

    Coefficients with magnitude below ``floor`` are pushed out to ``floor``
    along their own phase before dividing; an estimate of exactly zero
    yields a soft value of zero.
    """
    y = np.asarray(y, dtype=complex)
    h = np.asarray(ctf_estimate, dtype=complex)
    if y.shape != h.shape:
        raise ValueError("received grid and CTF estimate differ in length")
    mag = np.abs(h)
    zero = mag == 0
    small = (mag < floor) & ~zero
    h = np.where(small, floor * h / np.where(small, mag, 1.0), h)
    out = np.zeros_like(y)
    np.divide(y, h, out=out, where=~zero)
    return out
