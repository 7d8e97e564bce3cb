import json
import subprocess
import sys

import pytest

from apn.cli import main, parse_config_text, resolve_config
from apn.errors import ConfigError
from apn.imts_core import SynthConfig, generate_synthetic, load_dataset

SMALL = [
    "--patches", "4", "--hidden-dim", "8", "--te-dim", "4", "--epochs", "3",
    "--set", "train.patience=1", "--set", "train.batch_size=8",
]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "data.jsonl"
    rc = main(["generate", "--seed", "5", "--out", str(path), "--set", "synth.n_records=20", "--set", "synth.max_obs=20"])
    assert rc == 0
    return path


@pytest.fixture
def trained(tmp_path, data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *SMALL]) == 0
    return out


class TestConfig:
    def test_parse(self):
        text = "# header\ntrain.lr = 0.01  # inline\n\nseed=3\n"
        assert parse_config_text(text) == {"train.lr": "0.01", "seed": "3"}

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 1\nnonsense\n")

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("train.lr = 0.01\ntrain.n_patches = 6\nsplit.ratios = 0.6, 0.2, 0.2\n")
        resolved = resolve_config(str(cfg), {"train.lr": 0.5})
        assert resolved["train.lr"] == 0.5
        assert resolved["train.n_patches"] == 6
        assert resolved["split.ratios"] == (0.6, 0.2, 0.2)

    def test_model_seed_follows_seed(self):
        assert resolve_config(None, {"seed": "7"})["train.seed"] == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.lrr"):
            resolve_config(None, {"train.lrr": "1"})

    def test_bad_value_exit_code(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "x"), "--set", "synth.n_records=many"]) == 1

    def test_missing_subcommand(self):
        assert main([]) == 1


class TestGenerate:
    def test_round_trip(self, data, capsys):
        ds = load_dataset(data)
        assert ds == generate_synthetic(SynthConfig(n_records=20, max_obs=20), 5)

    def test_byte_identical(self, tmp_path, data):
        again = tmp_path / "again.jsonl"
        main(["generate", "--seed", "5", "--out", str(again), "--set", "synth.n_records=20", "--set", "synth.max_obs=20"])
        assert again.read_bytes() == data.read_bytes()

    def test_zero_records_writes_nothing(self, tmp_path):
        out = tmp_path / "none.jsonl"
        assert main(["generate", "--out", str(out), "--set", "synth.n_records=0"]) == 1
        assert not out.exists()

    def test_prints_counts(self, tmp_path, capsys):
        main(["generate", "--out", str(tmp_path / "d.jsonl"), "--set", "synth.n_records=3"])
        assert "wrote 3 records" in capsys.readouterr().out


class TestTrain:
    def test_outputs_and_echo(self, trained, capsys):
        metrics = json.loads((trained / "metrics.json").read_text())
        assert metrics["seed"] == 2024 and metrics["variant"] == "full"
        assert metrics["config"]["train.seed"] == 2024 and metrics["config"]["train.variant"] == "full"
        assert metrics["config"]["train.n_patches"] == 4
        ckpt = json.loads((trained / "checkpoint.json").read_text())
        assert ckpt["meta"]["config"] == metrics["config"]

    def test_summary_line(self, tmp_path, data, capsys):
        main(["train", "--data", str(data), "--out", str(tmp_path / "r"), *SMALL])
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("test MSE=") and " MAE=" in line and " epochs=" in line

    def test_rerun_identical_except_wall_time(self, data, trained):
        a = json.loads((trained / "metrics.json").read_text())
        ckpt = (trained / "checkpoint.json").read_bytes()
        main(["train", "--data", str(data), "--out", str(trained), *SMALL])
        b = json.loads((trained / "metrics.json").read_text())
        a.pop("wall_time_s"), b.pop("wall_time_s")
        assert a == b
        assert (trained / "checkpoint.json").read_bytes() == ckpt

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2

    def test_numeric_abort(self, tmp_path, data):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), *SMALL, "--lr", "1e300"]) == 3


class TestEval:
    def test_matches_train(self, tmp_path, data, trained):
        args = ["eval", "--data", str(data), "--checkpoint", str(trained / "checkpoint.json"), *SMALL]
        assert main([*args, "--out", str(tmp_path / "e1")]) == 0
        assert main([*args, "--out", str(tmp_path / "e2")]) == 0
        e1 = json.loads((tmp_path / "e1" / "eval_metrics.json").read_text())
        e2 = json.loads((tmp_path / "e2" / "eval_metrics.json").read_text())
        train_metrics = json.loads((trained / "metrics.json").read_text())
        assert (e1["mse"], e1["mae"]) == (train_metrics["mse"], train_metrics["mae"])
        e1["config"].pop("out"), e2["config"].pop("out")
        assert e1 == e2

    def test_corrupted_checkpoint(self, tmp_path, data):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["eval", "--data", str(data), "--checkpoint", str(bad), *SMALL]) == 2

    def test_dimension_mismatch(self, data, trained, capsys):
        args = ["eval", "--data", str(data), "--checkpoint", str(trained / "checkpoint.json"), *SMALL]
        assert main([*args, "--hidden-dim", "16"]) == 1
        err = capsys.readouterr().err
        assert "(16,)" in err and "(32,)" in err


class TestAblate:
    def test_table_shape(self, tmp_path, data):
        out = tmp_path / "abl"
        rc = main(["ablate", "--data", str(data), "--out", str(out), *SMALL, "--set", "ablate.seeds=1,2"])
        assert rc == 0
        table = json.loads((out / "ablation.json").read_text())
        assert len(table["rows"]) == 4 * 2 and len(table["medians"]) == 4
        text = (out / "ablation.txt").read_text()
        assert text.count("median") == 4
        assert table["config"]["ablate.seeds"] == [1, 2]

    def test_full_row_matches_train(self, tmp_path, data):
        out = tmp_path / "abl"
        main(["ablate", "--data", str(data), "--out", str(out), *SMALL,
              "--set", "ablate.seeds=2024", "--set", "ablate.variants=full"])
        main(["train", "--data", str(data), "--out", str(tmp_path / "t"), *SMALL])
        row = json.loads((out / "ablation.json").read_text())["rows"][0]
        assert row["mse"] == json.loads((tmp_path / "t" / "metrics.json").read_text())["mse"]

    def test_unknown_variant(self, tmp_path, data):
        assert main(["ablate", "--data", str(data), "--out", str(tmp_path), "--set", "ablate.variants=full,nope"]) == 1


class TestGradcheck:
    def test_pass(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "worst:" in out
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"] and "forecaster.pe" not in report["max_rel_error"]

    def test_noise_floor_fails(self, capsys):
        assert main(["gradcheck", "--tolerance", "1e-12"]) == 4
        worst = [l for l in capsys.readouterr().out.splitlines() if l.startswith("worst:")][0]
        assert "[" in worst and "FAIL" in worst


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "apn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
