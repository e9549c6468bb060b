import math

import pytest

from crnsim import cli, simcore


def run(argv):
    return cli.main([str(a) for a in argv])


def body(path):
    return "\n".join(ln for ln in path.read_text().splitlines() if not ln.startswith("#"))


def header(path):
    return dict(
        ln[2:].split("=", 1) for ln in path.read_text().splitlines() if ln.startswith("# ")
    )


class TestSnrGrid:
    def test_range(self):
        assert cli.parse_snr_grid("0:2:20") == [float(v) for v in range(0, 21, 2)]

    def test_list_and_inf(self):
        assert cli.parse_snr_grid("0, 5,inf") == [0.0, 5.0, math.inf]

    @pytest.mark.parametrize("text", ["", "5,3", "1,1", "0:0:4", "0:1"])
    def test_rejected(self, text):
        with pytest.raises(cli.UsageError):
            cli.parse_snr_grid(text)


class TestUsageErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["fly"],
            ["ser-sweep", "--snr", "10,5"],
            ["ser-sweep", "--estimators", "ls,magic"],
            ["ser-sweep", "--trials", "0"],
            ["mac-sim", "--scheme", "other"],
        ],
    )
    def test_exit_one(self, argv, tmp_path, capsys):
        try:
            code = run(argv + ["--out", tmp_path] if argv else argv)
        except SystemExit as exc:
            code = exc.code
        assert code == cli.EXIT_USAGE

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[meta]\nschema_version = 1\n[phy]\ncolour = red\n")
        assert run(["complexity-report", "--config", cfg, "--out", tmp_path]) == cli.EXIT_USAGE

    def test_numerical_failure(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[meta]\nschema_version = 1\n[phy]\nprofile = 0,0,0,0\nn_data = 2\n")
        argv = ["ser-sweep", "--config", cfg, "--snr", "inf", "--estimators", "mmse_direct", "--trials", 1, "--out", tmp_path]
        assert run(argv) == cli.EXIT_NUMERICAL


class TestSerSweep:
    def test_schema_header_and_noiseless_row(self, tmp_path):
        argv = ["ser-sweep", "--snr", "4,inf", "--trials", 2, "--out", tmp_path, "--seed", 3]
        assert run(argv) == 0
        out = tmp_path / "ser_sweep.csv"
        h = header(out)
        assert h["nDSC"] == "64" and h["taps"] == "4" and h["seed"] == "3" and len(h["config_hash"]) == 12
        rows = cli.read_csv(out)
        assert tuple(rows[0]) == cli.SER_COLUMNS
        assert len(rows) == 2 * len(cli.ESTIMATORS)
        for r in rows:
            assert float(r["ci_low"]) <= float(r["ser"]) <= float(r["ci_high"])
            if r["snr_db"] == "inf":
                assert float(r["ser"]) == 0.0

    def test_deterministic_and_worker_independent(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        common = ["ser-sweep", "--snr", "0:10:20", "--trials", 2, "--estimators", "ls,cr_mmse,cr_ml"]
        assert run(common + ["--out", a]) == 0
        assert run(common + ["--out", b, "--workers", 2]) == 0
        assert (a / "ser_sweep.csv").read_text() == (b / "ser_sweep.csv").read_text()

    def test_frames_default_reaches_symbol_budget(self):
        cfg = cli.phy_config(None)
        n = cli.frames_needed(cfg, cli.ESTIMATORS)
        assert n * cfg.n_data * 48 >= cli.MIN_SYMBOLS_PER_POINT

    def test_cr_mmse_and_direct_within_joint_ci(self):
        rows = cli.ser_sweep(cli.phy_config(None), [10.0], ("mmse_direct", "cr_mmse"), seed=2, frames=10)
        a, b = rows
        assert abs(a["ser"] - b["ser"]) <= (a["ci_high"] - a["ci_low"]) / 2 + (b["ci_high"] - b["ci_low"]) / 2

    def test_figure(self, tmp_path):
        argv = ["ser-sweep", "--snr", "0,10", "--trials", 1, "--estimators", "ls,cr_mmse", "--figures", "--out", tmp_path]
        assert run(argv) == 0
        assert (tmp_path / "ser_sweep.png").stat().st_size > 0


class TestMacSim:
    def test_both_policies_same_schema(self, tmp_path, monkeypatch):
        monkeypatch.setattr(simcore.Scenario, "scaled", classmethod(lambda cls, **kw: cls(n_channels=10, n_pu=6, duration=0.4, **kw)))
        assert run(["mac-sim", "--selection", "both", "--seed", 5, "--out", tmp_path, "--figures"]) == 0
        for kind in ("channels", "links", "summary", "trace"):
            a = cli.read_csv(tmp_path / f"mac_{kind}_cetp.csv")
            b = cli.read_csv(tmp_path / f"mac_{kind}_random.csv")
            assert a and b and list(a[0]) == list(b[0])
        for r in cli.read_csv(tmp_path / "mac_channels_cetp.csv"):
            assert 0.0 <= float(r["ratio"]) <= 1.0
        assert list(cli.read_csv(tmp_path / "mac_trace_cetp.csv")[0]) == ["seed", *simcore.TRACE_COLUMNS]
        assert (tmp_path / "mac_throughput_cetp.png").exists()

    def test_config_and_flags(self, tmp_path):
        cfg = tmp_path / "s.ini"
        cfg.write_text("[meta]\nschema_version = 1\n[scenario]\nduration = 0.3\nn_pu = 3\n")
        argv = ["mac-sim", "--config", cfg, "--no-power-control", "--scheme", "literal", "--trials", 2, "--out", tmp_path]
        assert run(argv) == 0
        rows = cli.read_csv(tmp_path / "mac_summary_cetp.csv")
        assert [r["seed"] for r in rows] == ["1", "2"]
        assert {r["power_control"] for r in rows} == {"0"}

    def test_deterministic(self, tmp_path):
        cfg = tmp_path / "s.ini"
        cfg.write_text("[meta]\nschema_version = 1\n[scenario]\nduration = 0.3\nn_rogue = 1\n")
        for d in ("a", "b"):
            assert run(["mac-sim", "--config", cfg, "--seed", 9, "--out", tmp_path / d]) == 0
        for kind in ("channels", "links", "summary", "trace"):
            name = f"mac_{kind}_cetp.csv"
            assert body(tmp_path / "a" / name) == body(tmp_path / "b" / name)

    def test_violation_exit_code(self, tmp_path, monkeypatch):
        cfg = tmp_path / "s.ini"
        cfg.write_text("[meta]\nschema_version = 1\n[scenario]\nduration = 0.2\n")
        original = simcore.Simulation._check_invariants

        def broken(self):
            original(self)
            self.m.violations.append("injected")

        monkeypatch.setattr(simcore.Simulation, "_check_invariants", broken)
        assert run(["mac-sim", "--config", cfg, "--out", tmp_path]) == cli.EXIT_INVARIANT


class TestEquivAndComplexity:
    def test_equiv_pass(self, tmp_path, capsys):
        assert run(["equiv-check", "--trials", 20, "--out", tmp_path]) == 0
        rows = cli.read_csv(tmp_path / "equiv_check.csv")
        assert {r["check"] for r in rows} == {"cr_mmse_vs_dense", *(f"cr_ml_vs_cls_D{d}" for d in (1, 2, 4, 8))}
        assert all(float(r["max_rel_dev"]) < 1e-9 for r in rows)
        assert "PASS cr_mmse_vs_dense" in capsys.readouterr().out

    def test_injected_fault_fails(self, tmp_path):
        assert run(["equiv-check", "--trials", 5, "--inject-fault", "sigma_v", "--out", tmp_path]) == cli.EXIT_INVARIANT
        rows = {r["check"]: r for r in cli.read_csv(tmp_path / "equiv_check.csv")}
        assert rows["cr_mmse_vs_dense"]["passed"] == "False"

    def test_complexity_report(self, tmp_path):
        assert run(["complexity-report", "--out", tmp_path, "--figures"]) == 0
        rows = {r["estimator"]: r for r in cli.read_csv(tmp_path / "complexity.csv")}
        assert set(rows) == set(cli.ESTIMATORS)
        assert rows["cr_mmse"]["solves"] == "0" and rows["cr_ml"]["solves"] == "0"
        assert (tmp_path / "complexity.png").exists()
