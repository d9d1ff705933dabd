"""Extract frozen teacher activations into the trainer's dataset format.

For every transcript, the pretrained bidirectional transformer runs once in
inference mode; per selected layer we keep the head-averaged attention
matrix [L x L] and the hidden-state sequence [L x d_model], special tokens
included. Files land in ``<out>/tensors/*.stdt`` next to a ``manifest.json``
the trainer loads directly. When an acoustic dataset is supplied, its
feature files are carried over so the result is a complete training set.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .tensorfile import write_tensor

DEFAULT_LAYERS = [3, 6, 9, 12]


class ExportError(RuntimeError):
    pass


@dataclass
class Transcript:
    id: str
    label: int
    text: str


@dataclass
class ExportJob:
    transcripts: list[Transcript]
    model_id: str = "bert-base-uncased"
    layers: list[int] = field(default_factory=lambda: list(DEFAULT_LAYERS))
    out_dir: str = "teacher-taps"
    acoustic_dataset: str | None = None
    dataset_name: str = "teacher-export"

    def __post_init__(self):
        if not self.transcripts:
            raise ExportError("no transcripts to export")
        labels = sorted({t.label for t in self.transcripts})
        if labels[0] < 0:
            raise ExportError("labels must be non-negative")


def load_transcripts(path) -> list[Transcript]:
    """Parse a UTF-8 tab-separated (id, label, text) file."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise ExportError(f"{path}:{lineno}: expected 'id<TAB>label<TAB>text'")
        out.append(Transcript(id=parts[0], label=int(parts[1]), text=parts[2]))
    return out


def load_model(model_id: str):
    """Pretrained tokenizer+model pair in inference mode, eager attention so
    per-layer attention probabilities are exposed."""
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModel.from_pretrained(model_id, attn_implementation="eager")
    model.eval()
    return tokenizer, model


def build_stub(seed: int = 0, n_layers: int = 12, d_model: int = 768,
               n_heads: int = 12, vocab_words: list[str] | None = None):
    """A randomly initialized teacher with the standard geometry.

    Offline stand-in for environments without model-hub access: same
    architecture, tokenizer over a tiny word-piece vocabulary, deterministic
    for a given seed.
    """
    import tempfile

    from transformers import BertConfig, BertModel

    try:
        from transformers import BertTokenizerLegacy as BertVocabTokenizer
    except ImportError:  # older transformers keep the classic class
        from transformers import BertTokenizer as BertVocabTokenizer

    words = vocab_words or _DEFAULT_VOCAB
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + sorted(set(words))
    with tempfile.NamedTemporaryFile("w", suffix=".vocab.txt", delete=False) as fh:
        fh.write("\n".join(vocab) + "\n")
        vocab_file = fh.name
    tokenizer = BertVocabTokenizer(vocab_file=vocab_file)
    cfg = BertConfig(vocab_size=len(vocab), num_hidden_layers=n_layers,
                     hidden_size=d_model, num_attention_heads=n_heads,
                     intermediate_size=4 * d_model,
                     attn_implementation="eager")
    torch.manual_seed(seed)
    model = BertModel(cfg)
    model.eval()
    return tokenizer, model


_DEFAULT_VOCAB = (
    "turn on off the lights light music play stop pause volume up down set "
    "temperature heat cool kitchen bedroom living room lamp open close door "
    "window what time is it weather today tomorrow alarm for at in to me my "
    "a an and please now next previous song"
).split()


def export(job: ExportJob, tokenizer=None, model=None) -> Path:
    """Run the teacher over every transcript and write taps + manifest.

    Returns the dataset directory. The teacher is never updated; everything
    runs under ``torch.no_grad``.
    """
    if tokenizer is None or model is None:
        tokenizer, model = load_model(job.model_id)
    cfg = model.config
    bad = [l for l in job.layers if not 1 <= l <= cfg.num_hidden_layers]
    if bad:
        raise ExportError(f"layers {bad} outside 1..{cfg.num_hidden_layers}")

    out = Path(job.out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    acoustic = _load_acoustic_index(job.acoustic_dataset) if job.acoustic_dataset else None

    records = []
    max_len = int(getattr(cfg, "max_position_embeddings", 512))
    for t in job.transcripts:
        enc = tokenizer(t.text, return_tensors="pt")
        length = int(enc["input_ids"].shape[1])
        if length > max_len:
            raise ExportError(f"utterance {t.id}: {length} tokens exceed the "
                              f"model maximum {max_len}")
        with torch.no_grad():
            outp = model(**enc, output_attentions=True, output_hidden_states=True)
        taps = {}
        for layer in job.layers:
            att = outp.attentions[layer - 1][0].mean(dim=0)  # head mean pooling
            hid = outp.hidden_states[layer][0]
            att_file = f"tensors/{t.id}.l{layer:02d}.att.stdt"
            hid_file = f"tensors/{t.id}.l{layer:02d}.hid.stdt"
            write_tensor(out / att_file, att.numpy())
            write_tensor(out / hid_file, hid.numpy())
            taps[str(layer)] = {"att": att_file, "hid": hid_file}
        record = {"id": t.id, "label": t.label, "teacher_len": length,
                  "taps": taps, "transcript": t.text}
        if acoustic is not None:
            src = acoustic["files"].get(t.id)
            if src is None:
                raise ExportError(f"utterance {t.id} has no acoustic features in "
                                  f"{job.acoustic_dataset}")
            rel = f"tensors/{t.id}.acoustic.stdt"
            shutil.copyfile(src["path"], out / rel)
            record["acoustic"] = rel
            record["length"] = src["length"]
        records.append(record)

    labels = sorted({t.label for t in job.transcripts})
    manifest = {
        "name": job.dataset_name,
        "n_classes": labels[-1] + 1,
        "teacher": {"n_layers": int(cfg.num_hidden_layers),
                    "d_model": int(cfg.hidden_size),
                    "layers": list(job.layers)},
        "utterances": records,
    }
    if acoustic is not None:
        manifest["d_acoustic"] = acoustic["d_acoustic"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True)
                                       + "\n")
    return out


def _load_acoustic_index(dataset_dir) -> dict:
    """Index an existing dataset's acoustic files by utterance id."""
    root = Path(dataset_dir)
    doc = json.loads((root / "manifest.json").read_text())
    files = {}
    for u in doc["utterances"]:
        files[u["id"]] = {"path": root / u["acoustic"], "length": u["length"]}
    return {"files": files, "d_acoustic": doc.get("d_acoustic", 256)}
