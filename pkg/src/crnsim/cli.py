"""Command-line front end.

Subcommands
-----------
ser-sweep          SER vs SNR for each estimator inside the DDCE loop.
mac-sim            Cross-layer network simulation (metrics + control trace).
equiv-check        Fast-path vs oracle equivalence for CR-MMSE and CR-ML.
complexity-report  Operation counts per channel estimate.

Exit codes: 0 success, 1 usage error, 2 invariant violation,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from . import baseband as bb
from . import simcore
from .ddce import ML_FAMILY, TrialConfig, aposteriori_cir, run_ser_trial
from .errors import NumericalFailure
from .estimators import (
    ESTIMATORS,
    PilotPattern,
    cr_ml_cir,
    cr_mmse_cir,
    dense_mmse_oracle,
    ls_ctf,
    ml_cir_cls,
    scalar_mmse_ctf,
)
from .transforms import MultCounter

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERICAL = 0, 1, 2, 3

EQUIV_TOL = 1e-9
MIN_SYMBOLS_PER_POINT = 200_000
DEFAULT_LMMSE_RANK = None

SER_COLUMNS = ("snr_db", "estimator", "ser", "ci_low", "ci_high", "mults_per_symbol")
CHANNEL_COLUMNS = ("seed", "selection", "channel", "tx_packets", "rx_packets", "ratio", "throughput_bps")
LINK_COLUMNS = ("seed", "selection", "pair", "throughput_bps", "mean_snr_db")
SUMMARY_COLUMNS = (
    "seed",
    "selection",
    "power_control",
    "throughput_bps",
    "grants",
    "auth_rejections",
    "forced_terminations",
    "backup_switches",
    "pu_arrivals_during_tx",
    "failed_requests",
    "denied_requests",
    "estimator_complex_mults",
    "violations",
)
EQUIV_COLUMNS = ("check", "instances", "max_rel_dev", "tolerance", "passed")
COMPLEXITY_COLUMNS = ("estimator", "complex_mults", "complex_adds", "real_mults", "solves")


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# argument helpers


def parse_snr_grid(text: str) -> list[float]:
    """``"0:2:20"`` (inclusive range), ``"0,5,inf"`` or a mix of both."""
    values: list[float] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            pieces = part.split(":")
            if len(pieces) != 3:
                raise UsageError(f"range {part!r} must be start:step:stop")
            start, step, stop = (float(p) for p in pieces)
            if step <= 0 or not math.isfinite(start + step + stop):
                raise UsageError(f"bad range {part!r}")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            values.extend(round(start + i * step, 10) for i in range(max(n, 0)))
        else:
            values.append(float(part))
    if not values:
        raise UsageError("SNR grid is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise UsageError("SNR grid must be strictly increasing")
    return values


def snr_to_sigma(snr_db: float) -> float:
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 10.0)


_PHY_KEYS = {
    "n_carriers": int,
    "scheme": str,
    "n_data": int,
    "n_taps": int,
    "pilot_spacing": int,
    "ml_decision_feedback": lambda v: v.strip().lower() in ("1", "true", "yes", "on"),
    "sigma_v_sq": float,
    "lmmse_rank": int,
    "profile": lambda v: tuple(float(x) for x in v.split(",") if x.strip()),
}


def phy_config(path: str | None) -> TrialConfig:
    """Default link parameters, overridden by the ``[phy]`` section of ``path``."""
    cfg = TrialConfig(lmmse_rank=DEFAULT_LMMSE_RANK)
    if path is None:
        return cfg
    parser = simcore.read_config(path)
    if not parser.has_section("phy"):
        return cfg
    values = dict(parser.items("phy"))
    unknown = set(values) - set(_PHY_KEYS)
    if unknown:
        raise ValueError(f"unknown [phy] keys: {sorted(unknown)}")
    changes = {k: _PHY_KEYS[k](v) for k, v in values.items()}
    if "profile" in changes and "n_taps" not in changes:
        changes["n_taps"] = len(changes["profile"])
    return dataclasses.replace(cfg, **changes)


def config_hash(obj) -> str:
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:12]


def write_csv(path: Path, header: dict, columns, rows) -> Path:
    """CSV with ``# key=value`` comment lines in front of the column header."""
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}={v}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue())
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path: Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _pool_map(fn, tasks, workers: int):
    """Ordered map; a single collector keeps row order independent of scheduling."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------
# ser-sweep


def frames_needed(cfg: TrialConfig, estimators) -> int:
    """Frames per point so every estimator sees at least 2e5 data symbols."""
    fewest = min(cfg.data_carriers(e).size for e in estimators)
    return math.ceil(MIN_SYMBOLS_PER_POINT / (cfg.n_data * fewest))


def _ser_point(task):
    cfg, estimator, seed, frames = task
    per_frame = []
    symbols = estimates = 0
    counter = MultCounter()
    for f in range(frames):
        # paired: the frame draw depends only on (seed, f)
        res = run_ser_trial(cfg, estimator, np.random.default_rng([seed, f]))
        per_frame.append(res.symbol_errors)
        symbols += res.symbols
        estimates += res.estimates
        counter.merge(res.counter)
    return per_frame, symbols, counter.complex_mults, estimates


def wilson_ci(errors: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(errors, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def ser_sweep(
    cfg: TrialConfig,
    snrs,
    estimators=ESTIMATORS,
    seed: int = 1,
    frames: int | None = None,
    workers: int = 1,
) -> list[dict]:
    """One row per (SNR, estimator), rows ordered by SNR then estimator.

    Frame ``f`` of every point is drawn from ``default_rng([seed, f])``, so
    all estimators and all SNRs see the same channels, bits and noise
    shapes.  Rows also carry per-frame error counts for paired tests.
    """
    frames = frames_needed(cfg, estimators) if frames is None else frames
    tasks = [
        (dataclasses.replace(cfg, sigma_w_sq=snr_to_sigma(s)), e, seed, frames)
        for s in snrs
        for e in estimators
    ]
    results = _pool_map(_ser_point, tasks, workers)
    rows = []
    for (task_cfg, est, _, _), (per_frame, n, mults, estimates), snr in zip(
        tasks, results, [s for s in snrs for _ in estimators]
    ):
        err = sum(per_frame)
        lo, hi = wilson_ci(err, n)
        rows.append(
            dict(
                snr_db=float(snr),
                estimator=est,
                ser=err / n,
                ci_low=lo,
                ci_high=hi,
                mults_per_symbol=mults / estimates if estimates else 0.0,
                errors=err,
                symbols=n,
                frame_errors=per_frame,
            )
        )
    return rows


# --------------------------------------------------------------------------
# equiv-check


def _rel_dev(a, b) -> float:
    scale = max(np.max(np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


def equivalence_report(
    trials: int = 100,
    seed: int = 1,
    cfg: TrialConfig | None = None,
    spacings=(1, 2, 4, 8),
    fault: str | None = None,
) -> list[dict]:
    """Max relative deviation of each fast path from its oracle.

    ``fault="sigma_v"`` feeds the fast CR-MMSE path a perturbed residual
    variance; the check must then fail.
    """
    cfg = TrialConfig() if cfg is None else cfg
    K = cfg.n_carriers
    params = cfg.params()
    fast_params = params
    if fault == "sigma_v":
        fast_params = params.replace(sigma_v_sq=2.0 * params.residual_var)
    elif fault is not None:
        raise UsageError(f"unknown fault {fault!r}")
    rng = np.random.default_rng([seed, 0xE0])
    rows = []

    worst = 0.0
    for _ in range(trials):
        cir = bb.generate_cir(np.asarray(cfg.profile), rng)
        x = bb.modulate(rng.integers(0, 2, K), "bpsk")
        y = bb.apply_channel(x, bb.cir_to_ctf(cir, K), cfg.sigma_w_sq, rng)
        h_mmse = scalar_mmse_ctf(y, x, params)
        fast = cr_mmse_cir(h_mmse, fast_params, K).taps
        worst = max(worst, _rel_dev(fast, dense_mmse_oracle(h_mmse, params)))
    rows.append(dict(check="cr_mmse_vs_dense", instances=trials, max_rel_dev=worst))

    for d in spacings:
        worst = 0.0
        for t in range(trials):
            pattern = PilotPattern.comb(K, d, offset=t % d)
            cir = bb.generate_cir(np.asarray(cfg.profile), rng)
            x = bb.modulate(rng.integers(0, 2, K), "bpsk")
            y = bb.apply_channel(x, bb.cir_to_ctf(cir, K), cfg.sigma_w_sq, rng)
            idx = pattern.indices
            h_ls = ls_ctf(y[idx], x[idx])
            fast = cr_ml_cir(h_ls, pattern, cfg.n_taps).taps
            worst = max(worst, _rel_dev(fast, ml_cir_cls(h_ls, pattern, cfg.n_taps).taps))
        rows.append(dict(check=f"cr_ml_vs_cls_D{d}", instances=trials, max_rel_dev=worst))

    for r in rows:
        r["tolerance"] = EQUIV_TOL
        r["passed"] = r["max_rel_dev"] < EQUIV_TOL
    return rows


# --------------------------------------------------------------------------
# complexity-report


def complexity_rows(cfg: TrialConfig, seed: int = 1) -> list[dict]:
    """Operation counts of one channel estimate per estimator."""
    K = cfg.n_carriers
    rng = np.random.default_rng([seed, 0xC0])
    cir = bb.generate_cir(np.asarray(cfg.profile), rng)
    x = bb.modulate(rng.integers(0, 2, K), "bpsk")
    y = bb.apply_channel(x, bb.cir_to_ctf(cir, K), cfg.sigma_w_sq, rng)
    params = cfg.params()
    rows = []
    for est in ESTIMATORS:
        counter = MultCounter()
        pattern = cfg.pilots_for(est) if est in ML_FAMILY else None
        aposteriori_cir(est, y, x, params, pattern, counter)
        rows.append(dict(estimator=est, **dataclasses.asdict(counter)))
    return rows


# --------------------------------------------------------------------------
# mac-sim


def _mac_run(scenario: simcore.Scenario):
    m = simcore.run(scenario)
    return scenario, m


def mac_rows(results):
    channels, links, summary, trace = [], [], [], []
    for sc, m in results:
        ratio, thr = m.ratio, m.channel_throughput
        for c in range(m.n_channels):
            channels.append(
                dict(
                    seed=sc.seed,
                    selection=sc.selection,
                    channel=c,
                    tx_packets=int(m.tx_packets[c]),
                    rx_packets=int(m.rx_packets[c]),
                    ratio=float(ratio[c]),
                    throughput_bps=float(thr[c]),
                )
            )
        link_thr = m.link_throughput
        for p in range(sc.n_su_pairs):
            snrs = [s for q, s in m.grant_snr_db if q == p]
            links.append(
                dict(
                    seed=sc.seed,
                    selection=sc.selection,
                    pair=p,
                    throughput_bps=float(link_thr[p]),
                    mean_snr_db=float(np.mean(snrs)) if snrs else float("nan"),
                )
            )
        summary.append(
            dict(
                seed=sc.seed,
                selection=sc.selection,
                power_control=int(sc.power_control),
                throughput_bps=m.throughput,
                grants=m.grants,
                auth_rejections=m.auth_rejections,
                forced_terminations=m.forced_terminations,
                backup_switches=m.backup_switches,
                pu_arrivals_during_tx=m.pu_arrivals_during_tx,
                failed_requests=m.failed_requests,
                denied_requests=m.denied_requests,
                estimator_complex_mults=m.complexity.complex_mults,
                violations=len(m.violations),
            )
        )
        for row in m.trace:
            trace.append(dict(zip(("seed",) + simcore.TRACE_COLUMNS, (sc.seed,) + row)))
    return channels, links, summary, trace


# --------------------------------------------------------------------------
# subcommand drivers


def _header(cmd: str, chash: str, seed: int, **extra) -> dict:
    return dict(command=cmd, config_hash=chash, seed=seed, **extra)


def cmd_ser_sweep(args) -> int:
    cfg = phy_config(args.config)
    if args.lmmse_rank is not None:
        cfg = dataclasses.replace(cfg, lmmse_rank=args.lmmse_rank)
    snrs = parse_snr_grid(args.snr)
    estimators = _estimator_list(args.estimators)
    frames = args.trials if args.trials is not None else frames_needed(cfg, estimators)
    rows = ser_sweep(cfg, snrs, estimators, args.seed, frames, args.workers)
    header = _header(
        "ser-sweep",
        config_hash(cfg),
        args.seed,
        nDSC=cfg.n_carriers,
        taps=cfg.n_taps,
        scheme=cfg.scheme,
        frames_per_point=frames,
        lmmse_rank=cfg.params().smoother_rank,
    )
    out = write_csv(args.out / "ser_sweep.csv", header, SER_COLUMNS, rows)
    print(f"wrote {out}")
    if args.figures:
        from .plotting import ser_figure

        print(f"wrote {ser_figure(rows, args.out / 'ser_sweep.png')}")
    return EXIT_OK


def cmd_mac_sim(args) -> int:
    base = simcore.Scenario.scaled()
    scenario = simcore.load_scenario(args.config, base) if args.config else base
    overrides = dict(eq3_mode=args.scheme, power_control=not args.no_power_control)
    if args.seed is not None:
        overrides["seed"] = args.seed
    scenario = scenario.replace(**overrides).validate()
    policies = ("cetp", "random") if args.selection == "both" else (args.selection,)
    n = args.trials if args.trials is not None else 1
    violations = []
    for pol in policies:
        runs = [scenario.replace(selection=pol, seed=scenario.seed + i) for i in range(n)]
        results = _pool_map(_mac_run, runs, args.workers)
        channels, links, summary, trace = mac_rows(results)
        for sc, m in results:
            violations.extend(f"seed {sc.seed} ({pol}): {v}" for v in m.violations)
        header = _header("mac-sim", scenario.replace(selection=pol).config_hash(), scenario.seed, seeds=n)
        files = [
            write_csv(args.out / f"mac_channels_{pol}.csv", header, CHANNEL_COLUMNS, channels),
            write_csv(args.out / f"mac_links_{pol}.csv", header, LINK_COLUMNS, links),
            write_csv(args.out / f"mac_summary_{pol}.csv", header, SUMMARY_COLUMNS, summary),
            write_csv(args.out / f"mac_trace_{pol}.csv", header, ("seed",) + simcore.TRACE_COLUMNS, trace),
        ]
        for f in files:
            print(f"wrote {f}")
        if args.figures:
            from .plotting import throughput_figure

            print(f"wrote {throughput_figure(channels, args.out / f'mac_throughput_{pol}.png')}")
    if violations:
        for v in violations:
            print(f"INVARIANT VIOLATION: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_equiv_check(args) -> int:
    cfg = phy_config(args.config)
    trials = args.trials if args.trials is not None else 100
    rows = equivalence_report(trials, args.seed, cfg, fault=args.inject_fault)
    write_csv(args.out / "equiv_check.csv", _header("equiv-check", config_hash(cfg), args.seed), EQUIV_COLUMNS, rows)
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['check']}: max relative deviation {r['max_rel_dev']:.3e} (tol {r['tolerance']:.0e})")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_INVARIANT


def cmd_complexity(args) -> int:
    cfg = phy_config(args.config)
    rows = complexity_rows(cfg, args.seed)
    header = _header("complexity-report", config_hash(cfg), args.seed, nDSC=cfg.n_carriers, taps=cfg.n_taps)
    write_csv(args.out / "complexity.csv", header, COMPLEXITY_COLUMNS, rows)
    for r in rows:
        print(f"{r['estimator']:>12}: {r['complex_mults']} complex mults, {r['solves']} solves")
    if args.figures:
        from .plotting import complexity_figure

        print(f"wrote {complexity_figure(rows, args.out / 'complexity.png')}")
    return EXIT_OK


def _estimator_list(text: str | None):
    if text is None:
        return ESTIMATORS
    names = tuple(e.strip() for e in text.split(",") if e.strip())
    bad = [e for e in names if e not in ESTIMATORS]
    if bad or not names:
        raise UsageError(f"unknown estimators {bad}; choose from {','.join(ESTIMATORS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crnsim", description="Cognitive-radio PHY/MAC simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, default_seed=1):
        p.add_argument("--config", help="INI config ([meta] schema_version = 1)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=default_seed)
        p.add_argument("--trials", type=int, help="frames per point / seeds / instances")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("ser-sweep", help="SER vs SNR per estimator")
    common(p)
    p.add_argument("--snr", default="0:2:20", help='e.g. "0:2:20" or "0,10,inf"')
    p.add_argument("--estimators", help=f"comma list from {','.join(ESTIMATORS)}")
    p.add_argument("--lmmse-rank", type=int, help="eigen-rank of the LMMSE reference")
    p.set_defaults(func=cmd_ser_sweep)

    p = sub.add_parser("mac-sim", help="network simulation")
    common(p, default_seed=None)
    p.add_argument("--scheme", choices=("canonical", "literal"), default="canonical", help="packet-count formula")
    p.add_argument("--selection", choices=("cetp", "random", "both"), default="cetp")
    p.add_argument("--no-power-control", action="store_true")
    p.set_defaults(func=cmd_mac_sim)

    p = sub.add_parser("equiv-check", help="fast path vs oracle equivalence")
    common(p)
    p.add_argument("--inject-fault", choices=("sigma_v",), help="test hook: perturb the fast path")
    p.set_defaults(func=cmd_equiv_check)

    p = sub.add_parser("complexity-report", help="operation counts per estimate")
    common(p)
    p.set_defaults(func=cmd_complexity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    for name in ("trials", "workers"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name} must be >= 1")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        code = args.func(args)
        log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
        return code
    except (UsageError, ValueError) as exc:
        print(f"crnsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"crnsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
