"""Pruned DFT kernels and complexity bookkeeping.

All transforms here use the engineering sign convention

    X[k] = sum_l x[l] * exp(-2j*pi*k*l/K)

and report their arithmetic into a :class:`MultCounter`.  Counts are
model counts for a radix-2 implementation, (K/2)*log2(K) complex
multiplications per K-point FFT, plus any explicit twiddle stage.  The
numbers are produced alongside a real computation with the same data
flow, so the pruned kernels below genuinely skip the zero inputs (or the
discarded outputs) they claim to skip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure


@dataclass
class MultCounter:
    """Operation tally for one estimation call (or an aggregate of calls)."""

    complex_mults: int = 0
    complex_adds: int = 0
    real_mults: int = 0
    solves: int = 0

    def add(self, mults: int = 0, adds: int = 0, real: int = 0) -> None:
        self.complex_mults += int(mults)
        self.complex_adds += int(adds)
        self.real_mults += int(real)

    def merge(self, other: "MultCounter") -> None:
        self.complex_mults += other.complex_mults
        self.complex_adds += other.complex_adds
        self.real_mults += other.real_mults
        self.solves += other.solves


def _counter(counter: MultCounter | None) -> MultCounter:
    return MultCounter() if counter is None else counter


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def fft_mults(n: int) -> int:
    """Complex multiplications of an n-point transform (radix-2 or direct)."""
    if n <= 1:
        return 0
    if is_pow2(n):
        return (n // 2) * int(np.log2(n))
    return n * n


def fft_adds(n: int) -> int:
    if n <= 1:
        return 0
    if is_pow2(n):
        return n * int(np.log2(n))
    return n * (n - 1)


def twiddle(n: int, k, l, sign: int = -1):
    return np.exp(sign * 2j * np.pi * np.multiply.outer(k, l) / n)


def dft(x: np.ndarray, counter: MultCounter | None = None) -> np.ndarray:
    """Full forward transform of ``x``."""
    x = np.asarray(x, dtype=complex)
    c = _counter(counter)
    c.add(fft_mults(x.size), fft_adds(x.size))
    return np.fft.fft(x)


def idft_unscaled(x: np.ndarray, counter: MultCounter | None = None) -> np.ndarray:
    """Full inverse transform without the 1/K factor."""
    x = np.asarray(x, dtype=complex)
    c = _counter(counter)
    c.add(fft_mults(x.size), fft_adds(x.size))
    return np.fft.ifft(x, norm="forward")


def _split(n_out: int, n_short: int) -> tuple[int, int] | None:
    """Block sizes (P, M) with P >= n_short a power of two and P*M == n_out."""
    p = next_pow2(n_short)
    if n_out % p:
        return None
    return p, n_out // p


def pruned_dft(taps: np.ndarray, n: int, counter: MultCounter | None = None) -> np.ndarray:
    """n-point forward DFT of a short sequence, treating taps[L:] as zero.

    Index split k = a + M*b with P = n/M >= L: every residue class ``a`` costs
    one twiddle pass over the L live inputs and one P-point FFT.  Falls back to
    direct O(n*L) summation when no power-of-two P divides ``n``.
    """
    h = np.asarray(taps, dtype=complex)
    L = h.size
    if L > n:
        raise ValueError(f"sequence length {L} exceeds transform size {n}")
    c = _counter(counter)
    split = _split(n, L)
    if split is None:
        c.add(n * L, n * (L - 1))
        return twiddle(n, np.arange(n), np.arange(L)) @ h
    p, m = split
    padded = np.zeros(p, dtype=complex)
    padded[:L] = h
    g = twiddle(n, np.arange(m), np.arange(p)) * padded[None, :]
    c.add((m - 1) * max(L - 1, 0), 0)
    c.add(m * fft_mults(p), m * fft_adds(p))
    blocks = np.fft.fft(g, axis=1)  # blocks[a, b] = X[a + M*b]
    return blocks.T.reshape(n)


def pruned_idft(
    spectrum: np.ndarray, n_out: int, counter: MultCounter | None = None
) -> np.ndarray:
    """First ``n_out`` samples of the unscaled inverse DFT of ``spectrum``.

    out[l] = sum_k exp(+2j*pi*k*l/K) * spectrum[k],  l < n_out.
    The transpose of :func:`pruned_dft`: P-point inverse FFTs over the
    decimated spectrum, then one twiddle-and-accumulate pass kept only for
    the outputs that are requested.
    """
    X = np.asarray(spectrum, dtype=complex)
    K = X.size
    if n_out > K:
        raise ValueError(f"requested {n_out} outputs from a {K}-point transform")
    c = _counter(counter)
    split = _split(K, n_out)
    if split is None:
        c.add(K * n_out, n_out * (K - 1))
        return twiddle(K, np.arange(n_out), np.arange(K), sign=+1) @ X
    p, m = split
    inner = np.fft.ifft(X.reshape(p, m).T, axis=1, norm="forward")  # [a, l]
    c.add(m * fft_mults(p), m * fft_adds(p))
    tw = twiddle(K, np.arange(m), np.arange(n_out), sign=+1)
    c.add((m - 1) * max(n_out - 1, 0), (m - 1) * n_out)
    return np.sum(tw * inner[:, :n_out], axis=0)


def solve(a: np.ndarray, b: np.ndarray, counter: MultCounter | None = None) -> np.ndarray:
    """Dense linear solve, tallied as one structural solve plus n^3 mults."""
    c = _counter(counter)
    n = a.shape[0]
    c.solves += 1
    c.add(n**3, n**3)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(str(exc)) from exc
