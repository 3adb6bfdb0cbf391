import numpy as np
import pytest

from larvae import cli, data


@pytest.fixture(scope="module")
def dataset_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "dsprites.bin"
    assert cli.main(["gen-data", "--preset", "dsprites-mini", "--seed", "1",
                     "-o", str(path)]) == 0
    return path


def config_file(tmp_path, dataset_file, out, **overrides):
    lines = {
        "dataset": str(dataset_file),
        "out": str(out),
        "iterations": 30,
        "batch_size": 16,
        "eval_every": 30,
        "eval_votes": 40,
        "eval_batch_per_vote": 8,
        "seed": 3,
    }
    lines.update(overrides)
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
    return path


class TestGenData:
    def test_declared_item_count(self, dataset_file):
        ds = data.load_dataset(dataset_file)
        assert len(ds) == 768
        assert ds.labels.shape == (768, 4)

    def test_byte_identical_across_seeds(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert cli.main(["gen-data", "--preset", "colors-mini", "--seed", "5",
                         "-o", str(a)]) == 0
        assert cli.main(["gen-data", "--preset", "colors-mini", "--seed", "5",
                         "-o", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_preset_exit_2(self, tmp_path, capsys):
        rc = cli.main(["gen-data", "--preset", "imagenet", "-o", str(tmp_path / "x")])
        assert rc == 2
        assert "unknown preset" in capsys.readouterr().err


class TestTrainCommand:
    def test_run_completes_with_artifacts(self, tmp_path, dataset_file):
        out = tmp_path / "run"
        cfg = config_file(tmp_path, dataset_file, out, tau=1.0, eta=0.02)
        assert cli.main(["train", str(cfg)]) == 0
        assert (out / "checkpoint.bin").exists()
        csv_text = (out / "metrics.csv").read_text()
        assert len(csv_text.splitlines()) >= 2
        resolved = (out / "resolved-config.txt").read_text()
        assert "tau=1.0" in resolved
        assert "gamma_tc=" in resolved  # defaults applied

    def test_missing_dataset_key_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("out=/tmp/x\n")
        assert cli.main(["train", str(cfg)]) == 2
        assert "dataset" in capsys.readouterr().err

    def test_unknown_key_exit_2(self, tmp_path, dataset_file, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"dataset={dataset_file}\nout=/tmp/x\nwarp_speed=9\n")
        assert cli.main(["train", str(cfg)]) == 2
        assert "warp_speed" in capsys.readouterr().err

    def test_rerun_reproduces_csv(self, tmp_path, dataset_file):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        cfg1 = config_file(tmp_path, dataset_file, out1)
        assert cli.main(["train", str(cfg1)]) == 0
        cfg2 = config_file(tmp_path, dataset_file, out2)
        assert cli.main(["train", str(cfg2)]) == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "checkpoint.bin").read_bytes() == (out2 / "checkpoint.bin").read_bytes()

    def test_non_finite_loss_exit_3(self, tmp_path, dataset_file, monkeypatch, capsys):
        from larvae import losses
        from larvae import autodiff as ad
        monkeypatch.setattr(losses, "label_recon_loss",
                            lambda *a, **k: ad.Tensor(float("inf")))
        cfg = config_file(tmp_path, dataset_file, tmp_path / "nf")
        assert cli.main(["train", str(cfg)]) == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_resolved_config_is_reusable(self, tmp_path, dataset_file):
        out = tmp_path / "orig"
        cfg = config_file(tmp_path, dataset_file, out)
        assert cli.main(["train", str(cfg)]) == 0
        resolved = cli.parse_config_text((out / "resolved-config.txt").read_text())
        rerun_out = tmp_path / "rerun"
        resolved["out"] = str(rerun_out)
        rerun_cfg = tmp_path / "rerun.cfg"
        rerun_cfg.write_text(cli.config_lines(resolved))
        assert cli.main(["train", str(rerun_cfg)]) == 0
        assert (out / "metrics.csv").read_bytes() == (rerun_out / "metrics.csv").read_bytes()


class TestSweepCommand:
    def test_tau_sweep_shapes(self, tmp_path, dataset_file):
        out = tmp_path / "sweeps"
        cfg = config_file(tmp_path, dataset_file, out, iterations=10, eval_every=10)
        rc = cli.main(["sweep", str(cfg), "--key", "tau",
                       "--values", "0,0.5,1"])
        assert rc == 0
        summary = (out / "sweep_tau" / "summary.csv").read_text().splitlines()
        assert summary[0] == "value,mig_mean,mig_std,l2_mean,l2_std,runs"
        assert len(summary) == 4  # one row per value
        for v in ("0.0", "0.5", "1.0"):
            assert (out / "sweep_tau" / f"tau={v}" / "metrics.csv").exists()

    def test_dim_z_sweep(self, tmp_path, dataset_file):
        out = tmp_path / "sweeps2"
        cfg = config_file(tmp_path, dataset_file, out, iterations=10, eval_every=10)
        rc = cli.main(["sweep", str(cfg), "--key", "dim_z", "--values", "0,2"])
        assert rc == 0
        lines = (out / "sweep_dim_z" / "summary.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_eta_sweep_with_seed_list(self, tmp_path, dataset_file):
        out = tmp_path / "sweeps3"
        cfg = config_file(tmp_path, dataset_file, out, iterations=10, eval_every=10)
        rc = cli.main(["sweep", str(cfg), "--key", "eta",
                       "--values", "0.01,0.02", "--seeds", "1,2"])
        assert rc == 0
        rows = (out / "sweep_eta" / "summary.csv").read_text().splitlines()[1:]
        assert len(rows) == 2
        assert all(row.rstrip().endswith(",2") for row in rows)  # 2 runs per value

    def test_invalid_key_exit_2(self, tmp_path, dataset_file):
        cfg = config_file(tmp_path, dataset_file, tmp_path / "x")
        assert cli.main(["sweep", str(cfg), "--key", "nope", "--values", "1"]) == 2


class TestTraverseCommand:
    def test_pgm_outputs(self, tmp_path, dataset_file):
        out = tmp_path / "run"
        cfg = config_file(tmp_path, dataset_file, out, iterations=5, eval_every=5)
        assert cli.main(["train", str(cfg)]) == 0
        trav = tmp_path / "trav"
        rc = cli.main(["traverse", "--checkpoint", str(out / "checkpoint.bin"),
                       "--dataset", str(dataset_file), "--item", "7", "--dim", "2",
                       "--steps", "5", "--out", str(trav)])
        assert rc == 0
        cells = sorted(trav.glob("trav_7_2_*.pgm"))
        names = {p.name for p in cells}
        assert names == {f"trav_7_2_{i}.pgm" for i in range(6)} | {"trav_7_2_strip.pgm"}
        blob = (trav / "trav_7_2_0.pgm").read_bytes()
        assert blob.startswith(b"P5\n16 16\n255\n")
        assert len(blob) == len(b"P5\n16 16\n255\n") + 256
        strip = (trav / "trav_7_2_strip.pgm").read_bytes()
        assert strip.startswith(b"P5\n96 16\n255\n")

    def test_ppm_for_color_dataset(self, tmp_path):
        color_file = tmp_path / "colors.bin"
        assert cli.main(["gen-data", "--preset", "colors-mini", "-o", str(color_file)]) == 0
        out = tmp_path / "crun"
        cfg = config_file(tmp_path, color_file, out, iterations=5, eval_every=5)
        assert cli.main(["train", str(cfg)]) == 0
        trav = tmp_path / "ctrav"
        rc = cli.main(["traverse", "--checkpoint", str(out / "checkpoint.bin"),
                       "--dataset", str(color_file), "--item", "0", "--dim", "0",
                       "--steps", "3", "--out", str(trav)])
        assert rc == 0
        blob = (trav / "trav_0_0_1.ppm").read_bytes()
        assert blob.startswith(b"P6\n16 16\n255\n")
        assert len(blob) == len(b"P6\n16 16\n255\n") + 3 * 256

    def test_deterministic_outputs(self, tmp_path, dataset_file):
        out = tmp_path / "run2"
        cfg = config_file(tmp_path, dataset_file, out, iterations=5, eval_every=5)
        assert cli.main(["train", str(cfg)]) == 0
        t1, t2 = tmp_path / "t1", tmp_path / "t2"
        for t in (t1, t2):
            assert cli.main(["traverse", "--checkpoint", str(out / "checkpoint.bin"),
                             "--dataset", str(dataset_file), "--item", "3", "--dim", "1",
                             "--steps", "4", "--out", str(t)]) == 0
        for p1 in t1.iterdir():
            assert p1.read_bytes() == (t2 / p1.name).read_bytes()


class TestGradcheckCommand:
    def test_passes_with_exit_0(self, capsys):
        assert cli.main(["gradcheck", "--instances", "2"]) == 0
        out = capsys.readouterr().out
        assert "PASS op add" in out
        assert "max rel err" in out

    def test_injected_fault_exit_1(self, capsys):
        assert cli.main(["gradcheck", "--instances", "1", "--fault", "mul"]) == 1
        captured = capsys.readouterr()
        assert "FAIL op mul" in captured.out
        assert "mul" in captured.err
