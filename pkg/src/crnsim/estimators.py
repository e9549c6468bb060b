"""Channel estimators for one OFDM symbol.

Frequency-domain estimators (LS, per-carrier MMSE, the low-rank LMMSE
reference) return a CTF.  Time-domain estimators (direct MMSE, reduced
complexity MMSE, constrained least squares and its pruned fast path) return
a short :class:`~crnsim.baseband.Cir`.

Every function takes an optional :class:`~crnsim.transforms.MultCounter`
and adds its arithmetic to it.  Only :func:`mmse_cir_direct`,
:func:`ml_cir_cls` and the oracle helpers perform linear solves.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .baseband import Cir, cir_to_ctf
from .transforms import MultCounter, pruned_idft, solve, twiddle

ESTIMATORS = ("ls", "mmse_scalar", "mmse_direct", "cr_mmse", "ml", "cr_ml", "lmmse")


def _c(counter):
    return MultCounter() if counter is None else counter


@dataclass(frozen=True)
class PilotPattern:
    """Subcarriers carrying known reference symbols.

    ``kind`` is ``"all"`` (every carrier), ``"comb"`` (every ``spacing``-th
    carrier starting at ``offset``) or ``"irregular"`` (explicit indices).
    """

    n_carriers: int
    kind: str = "all"
    spacing: int = 1
    offset: int = 0
    explicit: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("all", "comb", "irregular"):
            raise ValueError(f"unknown pilot pattern kind {self.kind!r}")
        if self.kind == "comb":
            if self.spacing < 1 or self.n_carriers % self.spacing:
                raise ValueError(
                    f"comb spacing {self.spacing} must divide K={self.n_carriers}"
                )
            if not 0 <= self.offset < self.spacing:
                raise ValueError("comb offset must lie in [0, spacing)")
        if self.kind == "irregular":
            idx = np.asarray(self.explicit)
            if idx.size == 0 or np.any(idx < 0) or np.any(idx >= self.n_carriers):
                raise ValueError("irregular pattern needs indices inside [0, K)")
            if np.unique(idx).size != idx.size:
                raise ValueError("duplicate pilot indices")

    @classmethod
    def all_carriers(cls, n_carriers: int) -> "PilotPattern":
        return cls(n_carriers, "all")

    @classmethod
    def comb(cls, n_carriers: int, spacing: int, offset: int = 0) -> "PilotPattern":
        if spacing == 1 and offset == 0:
            return cls(n_carriers, "all")
        return cls(n_carriers, "comb", spacing, offset)

    @classmethod
    def irregular(cls, n_carriers: int, indices) -> "PilotPattern":
        return cls(n_carriers, "irregular", explicit=tuple(int(i) for i in indices))

    @property
    def regular(self) -> bool:
        return self.kind in ("all", "comb")

    @property
    def step(self) -> int:
        return 1 if self.kind == "all" else self.spacing

    @property
    def indices(self) -> np.ndarray:
        if self.kind == "irregular":
            return np.asarray(self.explicit, dtype=int)
        return np.arange(self.offset if self.kind == "comb" else 0, self.n_carriers, self.step)

    @property
    def n_pilots(self) -> int:
        return self.indices.size


@dataclass(frozen=True, eq=False)
class EstimatorParams:
    """Second-order statistics the estimators are designed for.

    ``sigma_v_sq=None`` selects the default residual-noise variance of the
    per-carrier MMSE stage, ``sigma_w^2 / (1 + sigma_w^2/sigma_H^2)^2``.
    ``lmmse_rank=None`` means ``2 * n_taps``.
    """

    sigma_w_sq: float
    tap_profile: np.ndarray
    n_taps: int = 4
    sigma_v_sq: float | None = None
    lmmse_rank: int | None = None

    def __post_init__(self):
        profile = np.asarray(self.tap_profile, dtype=float)
        object.__setattr__(self, "tap_profile", profile)
        if self.sigma_w_sq < 0:
            raise ValueError("sigma_w_sq must be >= 0")
        if profile.ndim != 1 or profile.size == 0 or np.any(profile < 0):
            raise ValueError("tap_profile must be a non-empty non-negative vector")
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")
        if self.sigma_v_sq is not None and self.sigma_v_sq < 0:
            raise ValueError("sigma_v_sq must be >= 0")

    @property
    def sigma_h_sq(self) -> float:
        return float(self.tap_profile.sum())

    @property
    def residual_var(self) -> float:
        if self.sigma_v_sq is not None:
            return float(self.sigma_v_sq)
        if self.sigma_h_sq <= 0:
            raise ValueError("sigma_H^2 must be > 0")
        return self.sigma_w_sq / (1.0 + self.sigma_w_sq / self.sigma_h_sq) ** 2

    @property
    def smoother_rank(self) -> int:
        return 2 * self.n_taps if self.lmmse_rank is None else int(self.lmmse_rank)

    def replace(self, **changes) -> "EstimatorParams":
        fields = dict(
            sigma_w_sq=self.sigma_w_sq,
            tap_profile=self.tap_profile,
            n_taps=self.n_taps,
            sigma_v_sq=self.sigma_v_sq,
            lmmse_rank=self.lmmse_rank,
        )
        fields.update(changes)
        return EstimatorParams(**fields)


def _pair(y, x_ref):
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x_ref, dtype=complex)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("received and reference grids must be equal-length vectors")
    return y, x


def partial_dft_matrix(n_carriers: int, n_taps: int, rows=None) -> np.ndarray:
    """W[k, l] = exp(-2j*pi*k*l/K) for the selected carrier rows."""
    rows = np.arange(n_carriers) if rows is None else np.asarray(rows)
    return twiddle(n_carriers, rows, np.arange(n_taps))


# --------------------------------------------------------------------------
# frequency-domain estimators


def ls_ctf(y, x_ref, counter: MultCounter | None = None) -> np.ndarray:
    y, x = _pair(y, x_ref)
    if np.any(x == 0):
        raise ValueError("reference symbols must be non-zero")
    _c(counter).add(y.size)
    return y / x


def scalar_mmse_ctf(y, x_ref, params: EstimatorParams, counter: MultCounter | None = None):
    """Per-carrier Wiener estimate conj(x) * y / (|x|^2 + sigma_w^2/sigma_H^2)."""
    y, x = _pair(y, x_ref)
    if params.sigma_h_sq <= 0:
        raise ValueError("sigma_H^2 must be > 0")
    c = _c(counter)
    c.add(y.size)  # conj(x) * y
    c.add(real=y.size)  # real shrinkage
    return np.conj(x) * y / (np.abs(x) ** 2 + params.sigma_w_sq / params.sigma_h_sq)


def lmmse_reference_ctf(h_ls, params: EstimatorParams, counter: MultCounter | None = None):
    """Rank-limited frequency-domain Wiener smoother applied to an LS CTF.

    The smoother keeps the ``params.smoother_rank`` strongest eigenmodes of the
    design channel correlation W diag(profile) W^H.  When the true channel
    has more significant taps than the retained rank, the output keeps a
    model-mismatch error that does not vanish with SNR.
    """
    h_ls = np.asarray(h_ls, dtype=complex)
    basis, gains = _lmmse_design(
        h_ls.size, tuple(params.tap_profile), params.smoother_rank, params.sigma_w_sq
    )
    c = _c(counter)
    r = gains.size
    c.add(2 * h_ls.size * r, 2 * h_ls.size * r)
    return basis @ (gains * (basis.conj().T @ h_ls))


@lru_cache(maxsize=64)
def _lmmse_design(n_carriers: int, profile: tuple, rank: int, sigma_w_sq: float):
    prof = np.asarray(profile)
    w = partial_dft_matrix(n_carriers, prof.size)
    corr = (w * prof) @ w.conj().T
    eigval, eigvec = np.linalg.eigh(corr)
    order = np.argsort(eigval)[::-1][: max(0, min(rank, n_carriers))]
    lam = eigval[order]
    lam = np.where(lam > 1e-12 * max(eigval.max(), 0.0), lam, 0.0)  # rounding-level modes are null
    if np.isinf(sigma_w_sq):
        gains = np.zeros_like(lam)
    else:
        gains = np.divide(lam, lam + sigma_w_sq, out=np.zeros_like(lam), where=(lam + sigma_w_sq) > 0)
    return eigvec[:, order], gains


# --------------------------------------------------------------------------
# time-domain MMSE


def mmse_cir_direct(y, x_ref, params: EstimatorParams, counter: MultCounter | None = None) -> Cir:
    """MMSE CIR by explicit K0 x K0 inversion.

    h = (s_w I + diag(p) W^H diag(|x|^2) W)^-1 diag(p) W^H diag(conj x) y
    """
    y, x = _pair(y, x_ref)
    prof = params.tap_profile
    K, k0 = y.size, prof.size
    if K < k0:
        raise ValueError("fewer carriers than taps")
    c = _c(counter)
    w = partial_dft_matrix(K, k0)
    xy = np.conj(x) * y
    c.add(K)
    rhs = prof * (w.conj().T @ xy)
    c.add(K * k0 + k0, (K - 1) * k0)
    gram = (w.conj().T * np.abs(x) ** 2) @ w
    c.add(K * k0 * k0, (K - 1) * k0 * k0)
    lhs = params.sigma_w_sq * np.eye(k0) + prof[:, None] * gram
    c.add(k0 * k0)
    taps = solve(lhs, rhs, c)
    return Cir(taps, prof if np.any(prof > 0) else None)


def cr_mmse_cir(
    h_mmse_ctf,
    params: EstimatorParams,
    n_carriers: int,
    counter: MultCounter | None = None,
) -> Cir:
    """Reduced-complexity MMSE CIR from a full-band per-carrier MMSE CTF.

    h[l] = p_l / (s_v + K p_l) * sum_k exp(+2j*pi*k*l/K) * H_mmse[k]

    One output-pruned inverse transform plus K0 real scalings; no solve.
    """
    h = np.asarray(h_mmse_ctf, dtype=complex)
    if h.ndim != 1 or h.size != n_carriers:
        raise ValueError(
            f"reduced-complexity MMSE needs the CTF on all {n_carriers} carriers, got {h.size}"
        )
    prof = params.tap_profile
    if prof.size > n_carriers:
        raise ValueError("more taps than carriers")
    c = _c(counter)
    g = pruned_idft(h, prof.size, c)
    denom = params.residual_var + n_carriers * prof
    weight = np.divide(prof, denom, out=np.zeros_like(prof), where=prof > 0)
    c.add(real=prof.size)
    return Cir(weight * g, prof if np.any(prof > 0) else None)


def dense_mmse_oracle(h_mmse_ctf, params: EstimatorParams) -> np.ndarray:
    """Generic LMMSE solution of H_mmse = W h + v, C_h = diag(p), C_v = s_v I.

    Solved in the K x K observation space,
    h = C_h W^H (W C_h W^H + C_v)^-1 H_mmse, independently of any
    identity the fast path relies on.
    """
    h = np.asarray(h_mmse_ctf, dtype=complex)
    prof = params.tap_profile
    w = partial_dft_matrix(h.size, prof.size)
    cov = (w * prof) @ w.conj().T + params.residual_var * np.eye(h.size)
    return prof * (w.conj().T @ np.linalg.solve(cov, h))


# --------------------------------------------------------------------------
# maximum likelihood (constrained least squares)


def _pilot_values(h_ls_pilots, pattern: PilotPattern, n_taps: int) -> np.ndarray:
    r = np.asarray(h_ls_pilots, dtype=complex)
    if r.shape != (pattern.n_pilots,):
        raise ValueError(f"expected {pattern.n_pilots} pilot values, got {r.shape}")
    if n_taps < 1 or n_taps > pattern.n_carriers:
        raise ValueError("n_taps must lie in [1, K]")
    if pattern.n_pilots < n_taps:
        raise ValueError(
            f"{pattern.n_pilots} pilots cannot identify {n_taps} taps (rank deficient)"
        )
    return r


def ml_cir_cls(h_ls_pilots, pattern: PilotPattern, n_taps: int, counter: MultCounter | None = None) -> Cir:
    """Least-squares CIR of length ``n_taps`` fitted to LS values on the pilots.

    Normal equations (F^H F) h = F^H r with F the pilot rows of the partial
    DFT matrix.
    """
    r = _pilot_values(h_ls_pilots, pattern, n_taps)
    c = _c(counter)
    f = partial_dft_matrix(pattern.n_carriers, n_taps, pattern.indices)
    nu = pattern.n_pilots
    gram = f.conj().T @ f
    c.add(nu * n_taps * n_taps, (nu - 1) * n_taps * n_taps)
    rhs = f.conj().T @ r
    c.add(nu * n_taps, (nu - 1) * n_taps)
    return Cir(solve(gram, rhs, c))


def cr_ml_cir(h_ls_pilots, pattern: PilotPattern, n_taps: int, counter: MultCounter | None = None) -> Cir:
    """Constrained LS on a regular comb without a solve.

    On a comb with N_u teeth F^H F = N_u I, so the CLS solution reduces to a
    pruned N_u-point inverse transform over the teeth, a phase ramp for the
    comb offset and a 1/N_u scaling.
    """
    if not pattern.regular:
        raise ValueError("the pruned ML path needs a regular pilot comb")
    r = _pilot_values(h_ls_pilots, pattern, n_taps)
    c = _c(counter)
    nu = pattern.n_pilots
    g = pruned_idft(r, n_taps, c)
    if pattern.kind == "comb" and pattern.offset:
        ramp = np.exp(2j * np.pi * pattern.offset * np.arange(n_taps) / pattern.n_carriers)
        g = g * ramp
        c.add(n_taps - 1)
    c.add(real=n_taps)
    return Cir(g / nu)


def ctf_from_short_cir(cir: Cir, n_carriers: int, counter: MultCounter | None = None) -> np.ndarray:
    """Full-band CTF of a short CIR via the input-pruned transform."""
    return cir_to_ctf(cir, n_carriers, counter, pruned=True)


def projection_matrix(n_carriers: int, n_taps: int) -> np.ndarray:
    """Explicit K x K projector onto CTFs spanned by ``n_taps`` taps (small K only)."""
    w = partial_dft_matrix(n_carriers, n_taps)
    return w @ np.linalg.pinv(w)
