"""Export pipeline against a seeded stub teacher of the standard geometry."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from teacher_export import (ExportJob, Transcript, build_stub, export,
                            load_transcripts, read_tensor, verify_export,
                            write_tensor)
from teacher_export.export import ExportError

SAMPLE_TRANSCRIPTS = [
    ("utt00", 0, "turn on the lights"),
    ("utt01", 1, "play music now"),
    ("utt02", 2, "set the temperature to cool"),
    ("utt03", 3, "open the door"),
    ("utt04", 0, "turn off the lamp"),
    ("utt05", 1, "play the next song"),
    ("utt06", 2, "heat the living room"),
    ("utt07", 3, "close the window"),
    ("utt08", 0, "lights off please"),
    ("utt09", 1, "pause the music"),
]


@pytest.fixture(scope="module")
def stub():
    return build_stub(seed=11)


@pytest.fixture(scope="module")
def exported(stub, tmp_path_factory):
    tok, model = stub
    out = tmp_path_factory.mktemp("export")
    job = ExportJob(transcripts=[Transcript(*t) for t in SAMPLE_TRANSCRIPTS],
                    out_dir=out, layers=[3, 6, 9, 12])
    export(job, tokenizer=tok, model=model)
    return out


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
        write_tensor(tmp_path / "x.stdt", arr)
        np.testing.assert_array_equal(read_tensor(tmp_path / "x.stdt"), arr)

    def test_rejects_garbage(self, tmp_path):
        from teacher_export.tensorfile import TensorFileError
        (tmp_path / "bad.stdt").write_bytes(b"nope")
        with pytest.raises(TensorFileError):
            read_tensor(tmp_path / "bad.stdt")


class TestTranscripts:
    def test_tsv_round_trip(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("\n".join(f"{i}\t{l}\t{t}" for i, l, t in SAMPLE_TRANSCRIPTS),
                        encoding="utf-8")
        loaded = load_transcripts(path)
        assert len(loaded) == 10
        assert loaded[0].id == "utt00" and loaded[0].label == 0
        assert loaded[2].text == "set the temperature to cool"

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("only-one-field\n")
        with pytest.raises(ExportError, match="bad.tsv:1"):
            load_transcripts(path)


class TestExport:
    def test_standard_geometry(self, stub):
        _, model = stub
        assert model.config.num_hidden_layers == 12
        assert model.config.hidden_size == 768
        assert model.config.num_attention_heads == 12

    def test_manifest_structure(self, exported):
        doc = json.loads((exported / "manifest.json").read_text())
        assert doc["teacher"] == {"n_layers": 12, "d_model": 768,
                                  "layers": [3, 6, 9, 12]}
        assert doc["n_classes"] == 4
        assert len(doc["utterances"]) == 10
        for u in doc["utterances"]:
            assert set(u["taps"]) == {"3", "6", "9", "12"}

    def test_attention_rows_sum_to_one(self, exported):
        doc = json.loads((exported / "manifest.json").read_text())
        for u in doc["utterances"]:
            for files in u["taps"].values():
                att = read_tensor(exported / files["att"])
                np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-4)

    def test_hidden_width_768(self, exported):
        doc = json.loads((exported / "manifest.json").read_text())
        u = doc["utterances"][0]
        hid = read_tensor(exported / u["taps"]["12"]["hid"])
        assert hid.shape == (u["teacher_len"], 768)

    def test_round_trip_bit_exact(self, exported, tmp_path):
        doc = json.loads((exported / "manifest.json").read_text())
        src = exported / doc["utterances"][0]["taps"]["3"]["att"]
        arr = read_tensor(src)
        write_tensor(tmp_path / "copy.stdt", arr)
        assert src.read_bytes() == (tmp_path / "copy.stdt").read_bytes()

    def test_deterministic_given_seed(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            tok, model = build_stub(seed=3)
            out = tmp_path / name
            export(ExportJob(transcripts=[Transcript("u", 0, "turn on the lights")],
                             out_dir=out, layers=[12]), tokenizer=tok, model=model)
            outs.append((out / "tensors/u.l12.hid.stdt").read_bytes())
        assert outs[0] == outs[1]

    def test_verify_passes_on_fresh_export(self, exported):
        report = verify_export(exported)
        assert report.ok, str(report)
        assert report.checked == 10

    def test_verify_catches_corruption(self, exported, tmp_path):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(exported, broken)
        doc = json.loads((broken / "manifest.json").read_text())
        victim = broken / doc["utterances"][0]["taps"]["6"]["att"]
        write_tensor(victim, np.ones((3, 3), np.float32))
        report = verify_export(broken)
        assert not report.ok

    def test_verify_catches_missing_layer(self, exported, tmp_path):
        import shutil
        broken = tmp_path / "missing"
        shutil.copytree(exported, broken)
        doc = json.loads((broken / "manifest.json").read_text())
        del doc["utterances"][0]["taps"]["9"]
        (broken / "manifest.json").write_text(json.dumps(doc))
        report = verify_export(broken)
        assert not report.ok
        assert any("9" in p for p in report.problems)

    def test_bad_layer_selection_rejected(self, stub):
        tok, model = stub
        job = ExportJob(transcripts=[Transcript("u", 0, "hi")], layers=[13],
                        out_dir="unused")
        with pytest.raises(ExportError, match="13"):
            export(job, tokenizer=tok, model=model)


class TestCli:
    def test_run_and_verify_roundtrip(self, tmp_path):
        tsv = tmp_path / "t.tsv"
        tsv.write_text("\n".join(f"{i}\t{l}\t{t}" for i, l, t in SAMPLE_TRANSCRIPTS),
                       encoding="utf-8")
        out = tmp_path / "taps"
        res = subprocess.run(
            [sys.executable, "-m", "teacher_export.cli", "run",
             "--transcripts", str(tsv), "--out", str(out), "--stub-seed", "5"],
            capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        res = subprocess.run(
            [sys.executable, "-m", "teacher_export.cli", "verify", "--dir", str(out)],
            capture_output=True, text=True)
        assert res.returncode == 0, res.stdout + res.stderr
        assert "ok" in res.stdout
