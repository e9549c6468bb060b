"""Decision-directed channel estimation loop.

Per OFDM symbol the receiver

1. equalises with the CTF of its current a-priori CIR,
2. takes hard decisions (known pilots overwrite their carriers),
3. re-estimates an a-posteriori CIR from the received symbol and the
   decisions with the selected estimator,
4. predicts the next a-priori CIR tap by tap from the recent a-posteriori
   history.

Frequency-domain estimators (``ls``, ``mmse_scalar``, ``lmmse``) are carried
through the loop as a full K-tap CIR so that all estimators share one
predictor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import baseband as bb
from .errors import InvalidState
from .estimators import (
    ESTIMATORS,
    EstimatorParams,
    PilotPattern,
    cr_ml_cir,
    cr_mmse_cir,
    ls_ctf,
    lmmse_reference_ctf,
    ml_cir_cls,
    mmse_cir_direct,
    scalar_mmse_ctf,
)
from .transforms import MultCounter

ML_FAMILY = ("ml", "cr_ml")
HOLD = (1.0, 0.0, 0.0, 0.0)


def ewma_predictor(lam: float, order: int = 4) -> np.ndarray:
    """Coefficients lam*(1-lam)^i, renormalised to sum to one."""
    if not 0 < lam <= 1:
        raise ValueError("lam must lie in (0, 1]")
    a = lam * (1.0 - lam) ** np.arange(order)
    return a / a.sum()


@dataclass
class DdceState:
    n_carriers: int
    predictor: np.ndarray
    history: deque = field(default_factory=deque)
    current_apriori: bb.Cir | None = None

    def __post_init__(self):
        a = np.asarray(self.predictor, dtype=float)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("predictor needs at least one coefficient")
        if not np.isclose(a.sum(), 1.0, atol=1e-12):
            raise ValueError("predictor coefficients must sum to 1")
        self.predictor = a
        self.history = deque(self.history, maxlen=a.size)

    def apriori_ctf(self) -> np.ndarray:
        if self.current_apriori is None:
            raise InvalidState("DDCE state has not been bootstrapped")
        cir = self.current_apriori
        return bb.cir_to_ctf(cir, self.n_carriers, pruned=cir.n_taps < self.n_carriers)

    def push(self, apost: bb.Cir) -> None:
        self.history.appendleft(apost)
        n = len(self.history)
        a = self.predictor[:n]
        if n < self.predictor.size:
            a = a / a.sum() if a.sum() > 0 else np.eye(1, n).ravel()
        taps = sum(ai * h.taps for ai, h in zip(a, self.history))
        self.current_apriori = bb.Cir(taps, apost.profile)


def _ctf_as_cir(ctf: np.ndarray) -> bb.Cir:
    return bb.Cir(np.fft.ifft(ctf))


def aposteriori_cir(
    kind: str,
    y: np.ndarray,
    x_ref: np.ndarray,
    params: EstimatorParams,
    pattern: PilotPattern | None = None,
    counter: MultCounter | None = None,
) -> bb.Cir:
    """Run one estimator on a (received, reference) pair.

    ``pattern`` selects the carriers the ML family fits to; it defaults to
    all carriers.
    """
    K = y.size
    if kind == "ls":
        return _ctf_as_cir(ls_ctf(y, x_ref, counter))
    if kind == "mmse_scalar":
        return _ctf_as_cir(scalar_mmse_ctf(y, x_ref, params, counter))
    if kind == "lmmse":
        return _ctf_as_cir(lmmse_reference_ctf(ls_ctf(y, x_ref, counter), params, counter))
    if kind == "mmse_direct":
        return mmse_cir_direct(y, x_ref, params, counter)
    if kind == "cr_mmse":
        return cr_mmse_cir(scalar_mmse_ctf(y, x_ref, params, counter), params, K, counter)
    if kind in ML_FAMILY:
        pattern = PilotPattern.all_carriers(K) if pattern is None else pattern
        idx = pattern.indices
        h_ls = ls_ctf(y[idx], x_ref[idx], counter)
        fit = ml_cir_cls if kind == "ml" else cr_ml_cir
        return fit(h_ls, pattern, params.n_taps, counter)
    raise ValueError(f"unknown estimator {kind!r}; expected one of {ESTIMATORS}")


def bootstrap(
    x_train,
    y_train,
    kind: str,
    params: EstimatorParams,
    predictor=HOLD,
    counter: MultCounter | None = None,
) -> DdceState:
    """Initialise the loop from one all-pilot training symbol."""
    x_train = np.asarray(x_train, dtype=complex)
    y_train = np.asarray(y_train, dtype=complex)
    state = DdceState(y_train.size, np.asarray(predictor, dtype=float))
    state.push(aposteriori_cir(kind, y_train, x_train, params, counter=counter))
    return state


@dataclass
class StepResult:
    bits: np.ndarray
    x_hat: np.ndarray
    state: DdceState
    aposteriori: bb.Cir


def step(
    state: DdceState,
    y,
    kind: str,
    params: EstimatorParams,
    scheme: str = "bpsk",
    pilots: PilotPattern | None = None,
    pilot_symbols=None,
    fit_pattern: PilotPattern | None = None,
    counter: MultCounter | None = None,
    genie_symbols=None,
) -> StepResult:
    """Detect one OFDM symbol and update ``state`` in place.

    ``genie_symbols`` replaces the hard decisions fed back to the estimator
    (the returned bits are still the receiver's own decisions).
    """
    if state.current_apriori is None:
        raise InvalidState("DDCE state has not been bootstrapped")
    y = np.asarray(y, dtype=complex)
    soft = bb.equalize(y, state.apriori_ctf())
    bits, x_hat = bb.demodulate_hard(soft, scheme)
    if pilots is not None:
        x_hat[pilots.indices] = pilot_symbols
    feedback = x_hat if genie_symbols is None else np.asarray(genie_symbols, dtype=complex)
    apost = aposteriori_cir(kind, y, feedback, params, fit_pattern, counter)
    state.push(apost)
    return StepResult(bits, x_hat, state, apost)


# --------------------------------------------------------------------------
# one-frame SER trial


@dataclass(frozen=True)
class TrialConfig:
    """One frame: a training symbol followed by ``n_data`` data symbols."""

    sigma_w_sq: float = 0.1
    n_carriers: int = 64
    profile: tuple = tuple(bb.exponential_profile(4))
    scheme: str = "bpsk"
    n_data: int = 99
    n_taps: int = 4
    pilot_spacing: int = 4
    ml_decision_feedback: bool = True
    predictor: tuple = HOLD
    sigma_v_sq: float | None = None
    lmmse_rank: int | None = None
    design_profile: tuple | None = None

    def params(self) -> EstimatorParams:
        profile = self.profile if self.design_profile is None else self.design_profile
        return EstimatorParams(
            sigma_w_sq=self.sigma_w_sq,
            tap_profile=np.asarray(profile),
            n_taps=self.n_taps,
            sigma_v_sq=self.sigma_v_sq,
            lmmse_rank=self.lmmse_rank,
        )

    def pilots_for(self, kind: str) -> PilotPattern | None:
        if kind in ML_FAMILY and self.pilot_spacing > 1:
            return PilotPattern.comb(self.n_carriers, self.pilot_spacing)
        return None

    def data_carriers(self, kind: str) -> np.ndarray:
        mask = np.ones(self.n_carriers, dtype=bool)
        pilots = self.pilots_for(kind)
        if pilots is not None:
            mask[pilots.indices] = False
        return np.flatnonzero(mask)


@dataclass
class TrialResult:
    bit_errors: int
    symbol_errors: int
    symbols: int
    counter: MultCounter
    estimates: int


@dataclass
class Frame:
    cir: bb.Cir
    ctf: np.ndarray
    x: np.ndarray  # (n_data + 1, K), row 0 is the training symbol
    bits: np.ndarray  # (n_data + 1, K * bits_per_symbol)
    y: np.ndarray


def draw_frame(config: TrialConfig, rng: np.random.Generator, pilots: PilotPattern | None) -> Frame:
    """Channel, payload and noise for one frame.

    The draw order does not depend on the estimator, so two estimators run
    from equally seeded generators see the same channel, bits and noise.
    """
    K = config.n_carriers
    nb = bb.constellation(config.scheme).bits_per_symbol
    cir = bb.generate_cir(np.asarray(config.profile), rng)
    ctf = bb.cir_to_ctf(cir, K)
    n_sym = config.n_data + 1
    bits = rng.integers(0, 2, size=(n_sym, K * nb), dtype=np.uint8)
    noise = bb.complex_normal(rng, (n_sym, K))
    if pilots is not None:
        ref_bits = np.zeros(nb, dtype=np.uint8)
        per_carrier = bits[1:].reshape(config.n_data, K, nb)
        per_carrier[:, pilots.indices, :] = ref_bits
        bits[1:] = per_carrier.reshape(config.n_data, K * nb)
    x = np.stack([bb.modulate(row, config.scheme) for row in bits])
    y = ctf[None, :] * x + np.sqrt(config.sigma_w_sq) * noise
    y.setflags(write=False)
    return Frame(cir, ctf, x, bits, y)


def run_ser_trial(
    config: TrialConfig,
    kind: str,
    rng: np.random.Generator,
    csi: str = "ddce",
    feedback: str = "decision",
) -> TrialResult:
    """Simulate one frame end to end and count errors on data carriers.

    ``csi="perfect"`` equalises with the true CTF (genie receiver);
    ``feedback="genie"`` feeds the true symbols back to the estimator.
    """
    if csi not in ("ddce", "perfect"):
        raise ValueError("csi must be 'ddce' or 'perfect'")
    if feedback not in ("decision", "genie"):
        raise ValueError("feedback must be 'decision' or 'genie'")
    pilots = config.pilots_for(kind)
    frame = draw_frame(config, rng, pilots)
    data = config.data_carriers(kind)
    nb = bb.constellation(config.scheme).bits_per_symbol
    params = config.params()
    counter = MultCounter()
    fit = None
    if kind in ML_FAMILY and not config.ml_decision_feedback and pilots is not None:
        fit = pilots
    pilot_symbols = bb.modulate(np.zeros(nb, dtype=np.uint8), config.scheme)[0]

    state = None
    if csi == "ddce":
        state = bootstrap(frame.x[0], frame.y[0], kind, params, config.predictor, counter)
    bit_err = sym_err = 0
    for n in range(1, config.n_data + 1):
        if state is None:
            rx_bits, _ = bb.demodulate_hard(bb.equalize(frame.y[n], frame.ctf), config.scheme)
        else:
            res = step(
                state,
                frame.y[n],
                kind,
                params,
                config.scheme,
                pilots,
                pilot_symbols,
                fit,
                counter,
                genie_symbols=frame.x[n] if feedback == "genie" else None,
            )
            rx_bits = res.bits
        wrong = (rx_bits != frame.bits[n]).reshape(config.n_carriers, nb)[data]
        bit_err += int(wrong.sum())
        sym_err += int(wrong.any(axis=1).sum())
    estimates = 0 if state is None else config.n_data + 1
    return TrialResult(bit_err, sym_err, config.n_data * data.size, counter, estimates)
