"""End-to-end: exported teacher taps drive the trainer through its CLI.

Only external interfaces are exercised: the synth/train subcommands of the
trainer's CLI, the tensor-file format, and the dataset manifest schema.
"""

import json
import subprocess
import sys
from pathlib import Path

import pytest

TRANSCRIPTS = [
    ("u%05d" % i, label, text)
    for i, (label, text) in enumerate([
        (0, "turn on the lights"),
        (1, "play music now"),
        (2, "set the temperature to cool"),
        (3, "open the door"),
        (0, "turn off the lamp"),
        (1, "play the next song"),
        (2, "heat the living room"),
        (3, "close the window"),
        (0, "lights off please"),
        (1, "pause the music"),
    ])
]

SYNTH_CONFIG = {
    "teacher": {"n_layers": 4, "d_model": 32, "n_heads": 4, "d_ff": 64,
                "d_input": 16, "max_len": 32},
    "teacher_layers": [2, 4],
    "acoustic_noise": 2.0,
    "ls_range": [12, 20],
    "lt_range": [4, 8],
}


def run_cli(*argv):
    return subprocess.run([str(a) for a in argv], capture_output=True, text=True)


@pytest.fixture(scope="module")
def full_dataset(tmp_path_factory):
    """Synth acoustic features, export stub-teacher taps over them."""
    root = tmp_path_factory.mktemp("xmodal")
    synth_cfg = root / "synth.json"
    synth_cfg.write_text(json.dumps(SYNTH_CONFIG))
    res = run_cli(sys.executable, "-m", "stdistill.cli", "synth",
                  "--seed", "2", "--classes", "4", "--train-n", "10",
                  "--test-n", "8", "--out", root / "acoustic",
                  "--synth-config", synth_cfg)
    assert res.returncode == 0, res.stderr

    tsv = root / "transcripts.tsv"
    tsv.write_text("\n".join(f"{i}\t{l}\t{t}" for i, l, t in TRANSCRIPTS),
                   encoding="utf-8")
    res = run_cli(sys.executable, "-m", "teacher_export.cli", "run",
                  "--transcripts", tsv, "--out", root / "dataset",
                  "--stub-seed", "7", "--acoustic", root / "acoustic/train")
    assert res.returncode == 0, res.stderr
    return root


def test_export_passes_verification(full_dataset):
    res = run_cli(sys.executable, "-m", "teacher_export.cli", "verify",
                  "--dir", full_dataset / "dataset")
    assert res.returncode == 0, res.stdout + res.stderr


def test_trainer_runs_full_epoch_on_export(full_dataset, tmp_path):
    config = {
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "dataset": {"train": str(full_dataset / "dataset"),
                    "test": str(full_dataset / "dataset")},
        "student": {"n_layers": 2, "d_model": 32, "n_heads": 4, "d_ff": 64,
                    "d_input": 256, "dropout_p": 0.1, "max_len": 64},
        "distill": {"layer_map": [[6, 1], [12, 2]], "s_dmodel": 32,
                    "t_dmodel": 768},
        "train": {"epochs": 1, "batch_size": 4, "warmup_steps": 100},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    res = run_cli(sys.executable, "-m", "stdistill.cli", "train",
                  "--config", cfg_path, "--mode", "std")
    assert res.returncode == 0, res.stderr
    result = json.loads((tmp_path / "run/result.json").read_text())
    assert result["epochs"] == 1
    log_lines = (tmp_path / "run/train_log.jsonl").read_text().splitlines()
    record = json.loads(log_lines[0])
    assert record["loss_hid"] > 0  # real teacher taps flowed through the loss
