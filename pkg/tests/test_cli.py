import json

import pytest

from d2ip.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from d2ip.metrics import MetricsReport
from d2ip.phantom import load_sequence
from d2ip.pipeline import RunConfig, save_run_config


def simulate(tmp_path, case="case1", frames=3, snr="none", seed=0, grid=(16, 16, 8)):
    out = tmp_path / f"sim_{case}"
    code = main(
        [
            "simulate",
            "--case",
            case,
            "--grid",
            *map(str, grid),
            "--frames",
            str(frames),
            "--snr-db",
            snr,
            "--seed",
            str(seed),
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    return simulate(tmp_path_factory.mktemp("runs"))


def tiny_config(path, **overrides):
    defaults = dict(
        iters_warm=10,
        iters_first=5,
        iters_next=3,
        seed=0,
    )
    defaults.update(overrides)
    from d2ip.priornet import NetworkConfig

    cfg = RunConfig(network=NetworkConfig(base_channels=4), **defaults)
    save_run_config(cfg, path)
    return path


class TestSimulate:
    def test_outputs_and_manifest(self, sim_dir):
        for name in ("geometry.json", "sensitivity.f64", "truth.f64", "voltages.f64", "manifest.json"):
            assert (sim_dir / name).exists()
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["M"] == 416
        assert manifest["T_voltages"] == 3
        assert manifest["command"] == "simulate"

    def test_case2_has_one_fewer_frame(self, tmp_path):
        out = simulate(tmp_path, case="case2", frames=4)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["T_voltages"] == 3

    def test_deterministic_noise_free(self, tmp_path):
        a = simulate(tmp_path / "a", seed=3)
        b = simulate(tmp_path / "b", seed=3)
        assert (a / "voltages.f64").read_bytes() == (b / "voltages.f64").read_bytes()
        assert (a / "truth.f64").read_bytes() == (b / "truth.f64").read_bytes()

    def test_bad_grid_is_config_error(self, tmp_path):
        code = main(
            ["simulate", "--case", "case1", "--grid", "1", "4", "4", "--out", str(tmp_path / "x")]
        )
        assert code == EXIT_CONFIG


class TestReconstruct:
    def test_tikhonov_mu_sweep_one_output_per_mu(self, sim_dir, tmp_path):
        out = tmp_path / "tik"
        code = main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "tikhonov",
                "--mu",
                "0.001",
                "--mu",
                "0.01",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        assert (out / "recon_tikhonov_mu0.001.f64").exists()
        assert (out / "recon_tikhonov_mu0.01.f64").exists()
        seq = load_sequence(out / "recon_tikhonov_mu0.001.f64")
        assert seq.n_frames == 3
        assert not seq.is_ground_truth

    def test_d2ip_with_config_file(self, sim_dir, tmp_path):
        cfg_path = tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "d2ip"
        code = main(
            [
                "reconstruct",
                "--run",
        str(sim_dir),
                "--method",
                "d2ip",
                "--config",
                str(cfg_path),
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        for name in ("recon_d2ip.f64", "traces.csv", "timing.csv", "stages.csv", "run_config.json", "manifest.json"):
            assert (out / name).exists()
        stages = (out / "stages.csv").read_text().strip().splitlines()
        provenances = [line.split(",")[1] for line in stages[1:]]
        assert provenances == ["kaiming_init", "upws", "tpp", "tpp"]
        assert (out / "checkpoints" / "final.pt").exists()

    def test_d2ip_ablation_flags(self, sim_dir, tmp_path):
        cfg_path = tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "cold"
        code = main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "d2ip",
                "--config",
                str(cfg_path),
                "--disable",
                "upws,tpp",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        doc = json.loads((out / "run_config.json").read_text())
        assert doc["disable_upws"] and doc["disable_tpp"]

    def test_tv_method(self, sim_dir, tmp_path):
        out = tmp_path / "tv"
        code = main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "tv",
                "--tv-iterations",
                "20",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        assert (out / "recon_tv.f64").exists()

    def test_missing_inputs_io_error(self, tmp_path):
        code = main(
            ["reconstruct", "--run", str(tmp_path / "nope"), "--method", "tikhonov"]
        )
        assert code == EXIT_IO

    def test_divergent_run_numerical_exit_code(self, sim_dir, tmp_path):
        from d2ip.cli import EXIT_NUMERICAL

        cfg_path = tiny_config(tmp_path / "cfg.json", learning_rate=1e12)
        code = main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "d2ip",
                "--config",
                str(cfg_path),
                "--out",
                str(tmp_path / "diverge"),
            ]
        )
        assert code == EXIT_NUMERICAL


class TestEvaluate:
    def test_metrics_csv_and_plot(self, sim_dir, tmp_path):
        rec_out = tmp_path / "tik"
        main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "tikhonov",
                "--out",
                str(rec_out),
            ]
        )
        ev_out = tmp_path / "eval"
        code = main(
            [
                "evaluate",
                "--recon",
                str(rec_out / "recon_tikhonov_mu0.005.f64"),
                "--truth",
                str(sim_dir / "truth.f64"),
                "--geometry",
                str(sim_dir / "geometry.json"),
                "--out",
                str(ev_out),
            ]
        )
        assert code == EXIT_OK
        report = MetricsReport.from_csv(ev_out / "metrics.csv")
        assert len(report.per_frame) == 3
        assert (ev_out / "metrics.png").exists()

    def test_perfect_reconstruction_all_perfect(self, sim_dir, tmp_path):
        ev_out = tmp_path / "self"
        code = main(
            [
                "evaluate",
                "--recon",
                str(sim_dir / "truth.f64"),
                "--truth",
                str(sim_dir / "truth.f64"),
                "--geometry",
                str(sim_dir / "geometry.json"),
                "--out",
                str(ev_out),
            ]
        )
        assert code == EXIT_OK
        report = MetricsReport.from_csv(ev_out / "metrics.csv")
        assert report.means["err"] == 0.0
        assert report.means["psnr"] == 100.0

    def test_missing_truth_writes_marker(self, sim_dir, tmp_path):
        ev_out = tmp_path / "nogt"
        code = main(
            [
                "evaluate",
                "--recon",
                str(sim_dir / "truth.f64"),
                "--truth",
                str(tmp_path / "absent.f64"),
                "--geometry",
                str(sim_dir / "geometry.json"),
                "--out",
                str(ev_out),
            ]
        )
        assert code == EXIT_OK
        assert (ev_out / "no_ground_truth").exists()
        assert not (ev_out / "metrics.csv").exists()


class TestReport:
    def test_cross_run_report(self, sim_dir, tmp_path):
        cfg_path = tiny_config(tmp_path / "cfg.json")
        full = tmp_path / "full"
        cold = tmp_path / "cold"
        main(
            ["reconstruct", "--run", str(sim_dir), "--method", "d2ip", "--config", str(cfg_path), "--out", str(full)]
        )
        main(
            [
                "reconstruct",
                "--run",
                str(sim_dir),
                "--method",
                "d2ip",
                "--config",
                str(cfg_path),
                "--disable",
                "upws,tpp",
                "--out",
                str(cold),
            ]
        )
        rep_out = tmp_path / "report"
        code = main(["report", str(full), str(cold), "--out", str(rep_out)])
        assert code == EXIT_OK
        assert (rep_out / "accumulated_time.png").exists()
        assert (rep_out / "summary.csv").exists()
        assert (rep_out / "ablation_speedup.csv").exists()
        assert (rep_out / f"convergence_{full.name}.png").exists()


class TestMisc:
    def test_version_flag(self, capsys):
        assert main(["--version"]) == 0

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("D2IP_OUTPUT_ROOT", str(tmp_path))
        out = simulate(tmp_path)  # absolute path: env root ignored
        assert out.exists()
        code = main(
            ["simulate", "--case", "case1", "--frames", "2", "--out", "relative_run"]
        )
        assert code == EXIT_OK
        assert (tmp_path / "relative_run" / "manifest.json").exists()
