"""End-to-end CLI tests on tiny configurations."""

import json

import pytest

from bayesrppg.cli import main

TINY_NET = {
    "net": {"input_shape": [3, 16, 8, 8]},
    "train": {"epochs": 2, "batch_size": 2, "lr": 1e-3, "seed": 4},
}


def write_config(tmp_path, doc):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return str(p)


def synth_args(out, clips=6, frames=16, size="8x8", seed=1):
    return [
        "synth",
        "--out",
        str(out),
        "--clips",
        str(clips),
        "--frames",
        str(frames),
        "--size",
        size,
        "--seed",
        str(seed),
    ]


class TestSynth:
    def test_creates_records_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert main(synth_args(out, clips=4)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["records"]) == 4
        assert (out / "rec0000" / "clip.f32").exists()
        splits = {r["split"] for r in manifest["records"]}
        assert splits <= {"train", "test"}

    def test_fixed_hr_range(self, tmp_path):
        out = tmp_path / "data"
        assert main(synth_args(out) + ["--hr-range", "90:90"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert all(r["hr_bpm"] == 90.0 for r in manifest["records"])

    def test_same_seed_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(synth_args(out1, seed=7))
        main(synth_args(out2, seed=7))
        for rel in ["manifest.json", "rec0000/clip.f32", "rec0000/clip.json", "rec0000/bvp.csv"]:
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel

    def test_bad_hr_range_exits_2(self, tmp_path, capsys):
        assert main(synth_args(tmp_path / "d") + ["--hr-range", "banana"]) == 2
        assert "hr-range" in capsys.readouterr().err


class TestTrain:
    def test_produces_checkpoint_with_magic(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(synth_args(data, clips=6))
        ckpt = tmp_path / "run" / "model.ckpt"
        cfg = write_config(tmp_path, TINY_NET)
        code = main(["train", "--data", str(data), "--config", cfg, "--out", str(ckpt)])
        assert code == 0
        assert ckpt.read_bytes()[:4] == b"RFBP"
        assert (tmp_path / "run" / "effective_config.json").exists()
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert "finished epoch" in capsys.readouterr().out

    def test_unknown_config_key_exits_2_naming_key(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(synth_args(data, clips=4))
        cfg = write_config(tmp_path, {"train": {"learning_rate": 1e-3}})
        code = main(["train", "--data", str(data), "--config", cfg, "--out", str(tmp_path / "m.ckpt")])
        assert code == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_resume_continues_to_final_epoch(self, tmp_path):
        data = tmp_path / "data"
        main(synth_args(data, clips=6))
        cfg = write_config(tmp_path, TINY_NET)
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--data", str(data), "--config", cfg, "--out", str(ckpt), "--epochs", "1"]) == 0
        # the stored config keeps epochs=1, so extend while resuming
        from bayesrppg.trainer import Checkpoint

        assert Checkpoint.load(ckpt).epoch == 1
        code = main(["train", "--data", str(data), "--out", str(ckpt), "--from", str(ckpt), "--epochs", "2"])
        assert code == 0
        assert Checkpoint.load(ckpt).epoch == 2

    def test_missing_dataset_exits_1(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ckpt")])
        assert code == 1
        assert "manifest" in capsys.readouterr().err


EVAL_NET = {
    "net": {"input_shape": [3, 128, 8, 8]},
    "train": {"epochs": 1, "batch_size": 2, "lr": 1e-3, "seed": 4},
}


class TestEval:
    @pytest.fixture()
    def trained(self, tmp_path):
        data = tmp_path / "data"
        main(synth_args(data, clips=10, frames=128))
        cfg = write_config(tmp_path, EVAL_NET)
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data), "--config", cfg, "--out", str(ckpt)])
        return data, ckpt

    def test_report_files_and_schema(self, trained, tmp_path, capsys):
        data, ckpt = trained
        out = tmp_path / "report"
        code = main(
            [
                "eval",
                "--data",
                str(data),
                "--ckpt",
                str(ckpt),
                "--noise",
                "0,0.05",
                "--mc",
                "3",
                "--seed",
                "5",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report.keys()) == {"noise_levels", "accuracy", "spearman", "coverage"}
        assert report["noise_levels"] == [0.0, 0.05]
        assert (out / "report.txt").exists()
        scatter = (out / "scatter.csv").read_text().splitlines()
        assert scatter[0] == "noise_level,sample_id,uncertainty,abs_error_bpm"
        assert len(scatter) == 1 + 2 * 3  # levels * test records (10 clips -> 3 test)
        assert (out / "effective_config.json").exists()

    def test_single_noise_level_single_section(self, trained, tmp_path):
        data, ckpt = trained
        out = tmp_path / "r2"
        assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--noise", "0", "--mc", "2", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["accuracy"]) == 1

    def test_mc_1_warns_and_degenerates(self, trained, tmp_path, capsys):
        data, ckpt = trained
        out = tmp_path / "r3"
        code = main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--noise", "0", "--mc", "1", "--out", str(out)])
        assert code == 0
        assert "variance" in capsys.readouterr().err
        report = json.loads((out / "report.json").read_text())
        assert report["coverage"][0]["mean_ci_width"] == 0.0
        assert report["spearman"][0] is None

    def test_missing_checkpoint_exits_1(self, trained, tmp_path, capsys):
        data, _ = trained
        code = main(["eval", "--data", str(data), "--ckpt", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "r")])
        assert code == 1

    def test_report_txt_roundtrips_to_json_values(self, trained, tmp_path):
        data, ckpt = trained
        out = tmp_path / "r4"
        main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--noise", "0,0.01", "--mc", "3", "--out", str(out)])
        report = json.loads((out / "report.json").read_text())
        text = (out / "report.txt").read_text().splitlines()
        acc_rows = [l.split() for l in text[2 : 2 + len(report["noise_levels"])]]
        for row, acc in zip(acc_rows, report["accuracy"]):
            assert float(row[1]) == pytest.approx(acc["std"], abs=5e-5)
            assert float(row[2]) == pytest.approx(acc["mae"], abs=5e-5)
            assert float(row[3]) == pytest.approx(acc["rmse"], abs=5e-5)
        cov_header = text.index("95% confidence intervals")
        for i, cov in enumerate(report["coverage"]):
            row = text[cov_header + 2 + i].split()
            assert float(row[1]) == pytest.approx(cov["coverage_rate"], abs=5e-5)
            assert float(row[2]) == pytest.approx(cov["mean_ci_width"], abs=5e-5)


class TestPredict:
    def test_prints_table(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(synth_args(data, clips=6, frames=128))
        cfg = write_config(tmp_path, EVAL_NET)
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--data", str(data), "--config", cfg, "--out", str(ckpt)])
        capsys.readouterr()
        assert main(["predict", "--data", str(data), "--ckpt", str(ckpt), "--mc", "2"]) == 0
        out = capsys.readouterr().out
        assert "hr_mean" in out and "rec" in out
