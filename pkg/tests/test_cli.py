"""CLI: subcommands, config validation, exit codes, output formats."""

import json
from pathlib import Path

import numpy as np
import pytest

from stdistill.cli import main

SYNTH_CONFIG = {
    "teacher": {"n_layers": 4, "d_model": 32, "n_heads": 4, "d_ff": 64,
                "d_input": 16, "max_len": 32},
    "teacher_layers": [2, 4],
    "acoustic_noise": 2.0,
    "proto_center": 0.8,
    "ls_range": [12, 24],
    "lt_range": [4, 8],
}


def run_config(dataset_dir: Path, out_dir: Path, epochs=2, seed=0) -> dict:
    return {
        "seed": seed,
        "out_dir": str(out_dir),
        "dataset": {"train": str(dataset_dir / "train"),
                    "test": str(dataset_dir / "test")},
        "student": {"n_layers": 2, "d_model": 32, "n_heads": 4, "d_ff": 128,
                    "d_input": 256, "dropout_p": 0.1, "max_len": 64},
        "distill": {"layer_map": [[2, 1], [4, 2]], "s_dmodel": 32, "t_dmodel": 32},
        "train": {"epochs": epochs, "batch_size": 16, "warmup_steps": 100},
    }


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-ds")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps(SYNTH_CONFIG))
    code = main(["synth", "--seed", "3", "--classes", "4", "--train-n", "24",
                 "--test-n", "12", "--out", str(root / "ds"),
                 "--synth-config", str(cfg)])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained_run(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-run")
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(run_config(synth_dir / "ds", out / "run")))
    code = main(["train", "--config", str(cfg_path), "--mode", "std"])
    assert code == 0
    return out / "run"


class TestSynth:
    def test_reproducible(self, synth_dir, tmp_path):
        cfg = synth_dir / "synth.json"
        code = main(["synth", "--seed", "3", "--classes", "4", "--train-n", "24",
                     "--test-n", "12", "--out", str(tmp_path / "again"),
                     "--synth-config", str(cfg)])
        assert code == 0
        a = (synth_dir / "ds/train/tensors/u00000.acoustic.stdt").read_bytes()
        b = (tmp_path / "again/train/tensors/u00000.acoustic.stdt").read_bytes()
        assert a == b

    def test_manifest_reports_class_count(self, synth_dir):
        doc = json.loads((synth_dir / "ds/train/manifest.json").read_text())
        assert doc["n_classes"] == 4

    def test_two_seeds_differ(self, synth_dir, tmp_path):
        cfg = synth_dir / "synth.json"
        assert main(["synth", "--seed", "4", "--classes", "4", "--train-n", "24",
                     "--test-n", "12", "--out", str(tmp_path / "other"),
                     "--synth-config", str(cfg)]) == 0
        a = (synth_dir / "ds/train/tensors/u00000.acoustic.stdt").read_bytes()
        b = (tmp_path / "other/train/tensors/u00000.acoustic.stdt").read_bytes()
        assert a != b

    def test_refuses_non_empty_dir_without_force(self, synth_dir, capsys):
        cfg = synth_dir / "synth.json"
        code = main(["synth", "--seed", "3", "--classes", "4", "--train-n", "4",
                     "--test-n", "4", "--out", str(synth_dir / "ds"),
                     "--synth-config", str(cfg)])
        assert code == 1
        assert "force" in capsys.readouterr().err


class TestTrain:
    def test_std_run_outputs(self, trained_run):
        assert (trained_run / "config.json").exists()
        assert (trained_run / "train_log.jsonl").exists()
        assert (trained_run / "checkpoint/manifest.json").exists()
        result = json.loads((trained_run / "result.json").read_text())
        assert 0.0 <= result["test_accuracy"] <= 1.0
        assert result["alpha"] == [0.625, 0.125, 0.25]

    def test_baseline_mode_zeroes_weights(self, synth_dir, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(run_config(synth_dir / "ds", tmp_path / "run")))
        assert main(["train", "--config", str(cfg_path), "--mode", "baseline"]) == 0
        result = json.loads((tmp_path / "run/result.json").read_text())
        assert result["alpha"] == [0.625, 0.0, 0.0]
        echoed = json.loads((tmp_path / "run/config.json").read_text())
        assert echoed["distill"]["alpha2"] == 0.0
        assert echoed["distill"]["alpha3"] == 0.0

    def test_determinism_across_reruns(self, synth_dir, tmp_path):
        logs = []
        for name in ("a", "b"):
            cfg_path = tmp_path / f"{name}.json"
            cfg_path.write_text(json.dumps(run_config(synth_dir / "ds",
                                                      tmp_path / name, seed=5)))
            assert main(["train", "--config", str(cfg_path), "--mode", "std"]) == 0
            logs.append((tmp_path / name / "train_log.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_unknown_config_key_rejected(self, synth_dir, tmp_path, capsys):
        doc = run_config(synth_dir / "ds", tmp_path / "run")
        doc["learning_rate"] = 1.0
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps(doc))
        assert main(["train", "--config", str(cfg_path)]) == 1
        assert "unknown keys" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert main(["train", "--config", "/does/not/exist.json"]) == 1


class TestEval:
    def test_clean_eval_matches_training_end(self, trained_run, synth_dir, capsys):
        result = json.loads((trained_run / "result.json").read_text())
        code = main(["eval", "--checkpoint", str(trained_run / "checkpoint"),
                     "--dataset", str(synth_dir / "ds/test")])
        assert code == 0
        record = json.loads(capsys.readouterr().out.strip())
        assert record["accuracy"] == result["test_accuracy"]
        assert record["snr_db"] is None

    def test_noisy_eval_single_json_record(self, trained_run, synth_dir, capsys):
        code = main(["eval", "--checkpoint", str(trained_run / "checkpoint"),
                     "--dataset", str(synth_dir / "ds/test"), "--snr", "5"])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1
        record = json.loads(out[0])
        assert record["snr_db"] == 5.0
        assert "per_class" in record


class TestSweep:
    def test_csv_shape_and_header(self, trained_run, synth_dir, capsys, tmp_path):
        out_csv = tmp_path / "sweep.csv"
        code = main(["sweep", "--checkpoint", str(trained_run / "checkpoint"),
                     "--dataset", str(synth_dir / "ds/test"),
                     "--snrs", "15,10,5,0", "--seeds", "2",
                     "--out", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "snr_db,seed,accuracy"
        assert len(lines) == 1 + 4 * 2
        for line in lines[1:]:
            snr, seed, acc = line.split(",")
            assert float(acc) <= 1.0

    def test_default_snrs_are_paper_levels(self, trained_run, synth_dir, capsys):
        code = main(["sweep", "--checkpoint", str(trained_run / "checkpoint"),
                     "--dataset", str(synth_dir / "ds/test"), "--seeds", "1"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        snrs = [line.split(",")[0] for line in lines[1:]]
        assert snrs == ["15", "10", "5", "0"]

    def test_empty_snr_list_rejected(self, trained_run, synth_dir):
        assert main(["sweep", "--checkpoint", str(trained_run / "checkpoint"),
                     "--dataset", str(synth_dir / "ds/test"), "--snrs", ""]) == 1


class TestGradcheckCommand:
    def test_stock_build_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "checks passed" in out
        assert "FAIL" not in out


class TestDeterministicEval:
    def test_eval_reproducible_with_noise(self, trained_run, synth_dir, capsys):
        records = []
        for _ in range(2):
            assert main(["eval", "--checkpoint", str(trained_run / "checkpoint"),
                         "--dataset", str(synth_dir / "ds/test"),
                         "--snr", "10", "--noise-seed", "3"]) == 0
            records.append(capsys.readouterr().out)
        assert records[0] == records[1]
