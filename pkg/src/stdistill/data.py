"""Dataset container formats, synthetic data generation, batching and noise.

On-disk layout of a dataset:

    <dataset>/
      manifest.json          # name, class count, teacher metadata, utterances
      tensors/*.stdt         # one binary tensor file per array

The ``.stdt`` container is bit-exact: magic ``STDT``, u16 version, u8 dtype
code (0 = float32), u8 ndim, ndim x u32 little-endian dims, then row-major
little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import _interp_rows
from .encoder import EncoderConfig, FrozenTeacher
from .errors import DataError, TensorFileError
from .tensor import Tensor

MAGIC = b"STDT"
VERSION = 1
DTYPE_F32 = 0
_U32_MAX = 2**32 - 1


class BadMagicError(TensorFileError):
    pass


class BadVersionError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class ShapeOverflowError(TensorFileError):
    pass


def write_tensor(path, tensor) -> None:
    """Serialize a float32 tensor; ``read_tensor`` restores it bit-exactly."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    data = data.astype("<f4", copy=False)
    if data.ndim:
        data = np.ascontiguousarray(data)
    if any(d > _U32_MAX for d in data.shape):
        raise ShapeOverflowError(f"dimension exceeds u32 range: {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", VERSION, DTYPE_F32, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes())


def read_tensor(path) -> Tensor:
    """Read an ``.stdt`` file back into a frozen tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, ndim = struct.unpack("<HBB", raw[4:8])
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise TensorFileError(f"{path}: unknown dtype code {dtype_code}")
    need = 8 + 4 * ndim
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: truncated dimension list")
    dims = struct.unpack(f"<{ndim}I", raw[8:need]) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    if len(raw) != need + 4 * count:
        raise TruncatedFileError(
            f"{path}: payload holds {len(raw) - need} bytes, expected {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4", offset=need).reshape(dims)
    return Tensor(arr.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class UtteranceRecord:
    id: str
    label: int
    acoustic: str
    length: int
    teacher_len: int = 0
    taps: dict[str, dict[str, str]] = field(default_factory=dict)
    transcript: str | None = None


@dataclass
class Manifest:
    name: str
    n_classes: int
    teacher: dict
    utterances: list[UtteranceRecord]
    d_acoustic: int = 256

    @property
    def teacher_layers(self) -> list[int]:
        return [int(x) for x in self.teacher.get("layers", [])]


def save_manifest(dataset_dir, manifest: Manifest) -> Path:
    path = Path(dataset_dir) / "manifest.json"
    doc = {
        "name": manifest.name,
        "n_classes": manifest.n_classes,
        "d_acoustic": manifest.d_acoustic,
        "teacher": manifest.teacher,
        "utterances": [
            {k: v for k, v in {
                "id": u.id, "label": u.label, "acoustic": u.acoustic,
                "length": u.length, "teacher_len": u.teacher_len,
                "taps": u.taps, "transcript": u.transcript,
            }.items() if v is not None}
            for u in manifest.utterances
        ],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(dataset_dir) -> Manifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json under {dataset_dir}")
    doc = json.loads(path.read_text())
    try:
        utts = [UtteranceRecord(
            id=u["id"], label=int(u["label"]), acoustic=u["acoustic"],
            length=int(u["length"]), teacher_len=int(u.get("teacher_len", 0)),
            taps=u.get("taps", {}), transcript=u.get("transcript"),
        ) for u in doc["utterances"]]
        return Manifest(name=doc["name"], n_classes=int(doc["n_classes"]),
                        teacher=doc.get("teacher", {}), utterances=utts,
                        d_acoustic=int(doc.get("d_acoustic", 256)))
    except KeyError as err:
        raise DataError(f"manifest {path} is missing field {err}") from err


@dataclass
class Utterance:
    """One loaded example: acoustic sequence, label, optional teacher taps."""
    id: str
    label: int
    acoustic: np.ndarray
    taps: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    transcript: str | None = None

    @property
    def length(self) -> int:
        return self.acoustic.shape[0]

    @property
    def teacher_len(self) -> int:
        if not self.taps:
            return 0
        att, _ = next(iter(self.taps.values()))
        return att.shape[0]


@dataclass
class Dataset:
    manifest: Manifest
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)


def load_dataset(dataset_dir, validate: bool = True) -> Dataset:
    """Load every tensor referenced by the manifest, validating shapes and
    labels before anything reaches training."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    t_dmodel = int(manifest.teacher.get("d_model", 0))
    utterances = []
    for rec in manifest.utterances:
        acoustic = read_tensor(root / rec.acoustic).data
        if validate:
            if acoustic.ndim != 2 or acoustic.shape != (rec.length, manifest.d_acoustic):
                raise DataError(
                    f"utterance {rec.id}: acoustic shape {acoustic.shape} does not "
                    f"match declared ({rec.length}, {manifest.d_acoustic})")
            if not 0 <= rec.label < manifest.n_classes:
                raise DataError(f"utterance {rec.id}: label {rec.label} outside "
                                f"[0, {manifest.n_classes})")
        taps: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for layer_key, files in sorted(rec.taps.items(), key=lambda kv: int(kv[0])):
            att = read_tensor(root / files["att"]).data
            hid = read_tensor(root / files["hid"]).data
            if validate:
                lt = rec.teacher_len
                if att.shape != (lt, lt):
                    raise DataError(f"utterance {rec.id}: layer {layer_key} attention "
                                    f"shape {att.shape}, expected ({lt}, {lt})")
                if hid.shape[0] != lt or (t_dmodel and hid.shape[1] != t_dmodel):
                    raise DataError(f"utterance {rec.id}: layer {layer_key} hidden "
                                    f"shape {hid.shape}, expected ({lt}, {t_dmodel})")
            taps[int(layer_key)] = (att, hid)
        utterances.append(Utterance(id=rec.id, label=rec.label, acoustic=acoustic,
                                    taps=taps, transcript=rec.transcript))
    if validate:
        labels = {u.label for u in utterances}
        if utterances and labels != set(range(manifest.n_classes)):
            raise DataError(f"labels {sorted(labels)} do not cover "
                            f"0..{manifest.n_classes - 1}")
    if not utterances:
        raise DataError(f"dataset {dataset_dir} is empty")
    return Dataset(manifest=manifest, utterances=utterances)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded utterance group. Mask is true exactly where t < valid length;
    padded cells are zero."""
    acoustic: np.ndarray              # [B, L_max, d_acoustic] float32
    mask: np.ndarray                  # [B, L_max] bool
    labels: np.ndarray                # [B] int64
    lengths: np.ndarray               # [B] int64
    ids: list[str]
    taps_att: dict[int, np.ndarray]   # layer -> [B, Lt_max, Lt_max]
    taps_hid: dict[int, np.ndarray]   # layer -> [B, Lt_max, d_t]
    t_lengths: np.ndarray             # [B] int64

    def __len__(self) -> int:
        return self.acoustic.shape[0]


def _pad_stack(arrays: list[np.ndarray]) -> np.ndarray:
    maxes = tuple(max(a.shape[i] for a in arrays) for i in range(arrays[0].ndim))
    out = np.zeros((len(arrays),) + maxes, dtype=np.float32)
    for i, a in enumerate(arrays):
        out[(i,) + tuple(slice(0, s) for s in a.shape)] = a
    return out


def collate(utterances: list[Utterance]) -> Batch:
    lengths = np.array([u.length for u in utterances], dtype=np.int64)
    l_max = int(lengths.max())
    mask = np.arange(l_max)[None, :] < lengths[:, None]
    layers = sorted(utterances[0].taps.keys())
    taps_att = {lyr: _pad_stack([u.taps[lyr][0] for u in utterances]) for lyr in layers}
    taps_hid = {lyr: _pad_stack([u.taps[lyr][1] for u in utterances]) for lyr in layers}
    return Batch(
        acoustic=_pad_stack([u.acoustic for u in utterances]),
        mask=mask,
        labels=np.array([u.label for u in utterances], dtype=np.int64),
        lengths=lengths,
        ids=[u.id for u in utterances],
        taps_att=taps_att,
        taps_hid=taps_hid,
        t_lengths=np.array([u.teacher_len for u in utterances], dtype=np.int64),
    )


def make_batches(dataset: Dataset, batch_size: int, seed: int = 0,
                 shuffle: bool = True, epoch: int = 0):
    """Yield padded batches; the shuffle order is a pure function of
    (seed, epoch)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C]))
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = [dataset.utterances[i] for i in order[start:start + batch_size]]
        yield collate(chunk)


# ---------------------------------------------------------------------------
# noise injection


def inject_noise(acoustic, snr_db: float, seed: int) -> np.ndarray:
    """Add seeded white Gaussian noise at an exact signal-to-noise ratio.

    Power is the mean squared value over all elements; the drawn noise is
    rescaled so the achieved ratio matches ``snr_db`` exactly.
    """
    x = acoustic.data if isinstance(acoustic, Tensor) else np.asarray(acoustic)
    x = x.astype(np.float32, copy=False)
    p_signal = float(np.mean(x.astype(np.float64) ** 2))
    if p_signal == 0.0:
        raise DataError("inject_noise: input has zero power")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5172]))
    noise = rng.standard_normal(x.shape)
    p_target = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(p_target / np.mean(noise ** 2))
    return (x + noise).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic cross-modal dataset


@dataclass
class SynthSpec:
    """Generation knobs for the synthetic dataset.

    Acoustic sequences are time-upsampled linear images of the teacher-side
    token embeddings plus Gaussian noise, so the distillation taps and the
    classifier input share class-bearing structure.
    """
    n_classes: int = 8
    n_train: int = 512
    n_test: int = 128
    teacher: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(n_layers=12, d_model=768, n_heads=12,
                                              d_ff=3072, d_input=768))
    teacher_layers: list[int] = field(default_factory=lambda: [3, 6, 9, 12])
    d_acoustic: int = 256
    lt_range: tuple[int, int] = (6, 12)
    ls_range: tuple[int, int] = (20, 60)
    n_prototypes: int = 4
    token_jitter: float = 0.1
    acoustic_noise: float = 1.0
    # fraction of each class's mean prototype removed: classes then differ
    # mostly in temporal pattern, not in time-average, keeping the
    # mean-pool linear probe off the ceiling
    proto_center: float = 0.0
    # when true, classes share one prototype bank and differ in the ORDER
    # the prototypes appear (plus a small class offset): the time-average
    # carries little class signal, the temporal pattern carries most of it
    ordered_prototypes: bool = False
    class_offset: float = 0.3

    def __post_init__(self):
        if self.n_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.n_classes}")
        for lo, hi in (self.lt_range, self.ls_range):
            if not 1 <= lo <= hi:
                raise DataError(f"bad length range ({lo}, {hi})")
        bad = [l for l in self.teacher_layers if not 1 <= l <= self.teacher.n_layers]
        if bad:
            raise DataError(f"teacher tap layers {bad} outside "
                            f"1..{self.teacher.n_layers}")


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([i % k for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    return labels


def _distinct_orders(k: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct orderings of range(m) (falls back to repeats when m! < k)."""
    seen: set[tuple[int, ...]] = set()
    orders: list[tuple[int, ...]] = []
    attempts = 0
    while len(orders) < k:
        perm = tuple(int(x) for x in rng.permutation(m))
        attempts += 1
        if perm not in seen or attempts > 50 * k:
            seen.add(perm)
            orders.append(perm)
    return np.array(orders, dtype=np.int64)


def _class_prototypes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-class token prototype sequences [K, m, d_emb]."""
    k, m, d = spec.n_classes, spec.n_prototypes, spec.teacher.d_input
    if spec.ordered_prototypes:
        bank = rng.standard_normal((m, d))
        orders = _distinct_orders(k, m, rng)
        offsets = spec.class_offset * rng.standard_normal((k, 1, d))
        prototypes = bank[orders] + offsets
    else:
        prototypes = rng.standard_normal((k, m, d))
    if spec.proto_center:
        prototypes = prototypes - spec.proto_center * prototypes.mean(axis=1,
                                                                      keepdims=True)
    return prototypes


def _upsample_time(tokens: np.ndarray, l_out: int) -> np.ndarray:
    return _interp_rows(tokens.astype(np.float64), l_out)


def synthesize_dataset(out_dir, seed: int, spec: SynthSpec | None = None) -> dict:
    """Generate train/ and test/ dataset directories under ``out_dir``.

    Everything (teacher weights, prototypes, lengths, noise) is a pure
    function of ``seed`` and the spec. Returns summary info.
    """
    spec = spec or SynthSpec()
    out = Path(out_dir)
    root_ss = np.random.SeedSequence([int(seed), 0xDA7A])
    proto_ss, mix_ss, teacher_ss, train_ss, test_ss = root_ss.spawn(5)

    k, d_emb = spec.n_classes, spec.teacher.d_input
    prototypes = _class_prototypes(spec, np.random.default_rng(proto_ss))
    mix = (np.random.default_rng(mix_ss).standard_normal((d_emb, spec.d_acoustic))
           / np.sqrt(d_emb))
    teacher = FrozenTeacher(spec.teacher,
                            seed=int(np.random.default_rng(teacher_ss).integers(2**31)))

    info = {"seed": int(seed), "n_classes": k, "splits": {}}
    for split, count, split_ss in (("train", spec.n_train, train_ss),
                                   ("test", spec.n_test, test_ss)):
        split_dir = out / split
        (split_dir / "tensors").mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(split_ss)
        labels = _balanced_labels(count, k, rng)
        records = []
        for idx in range(count):
            c = int(labels[idx])
            l_t = int(rng.integers(spec.lt_range[0], spec.lt_range[1] + 1))
            l_s = int(rng.integers(spec.ls_range[0], spec.ls_range[1] + 1))
            tokens = (prototypes[c][np.arange(l_t) % spec.n_prototypes]
                      + spec.token_jitter * rng.standard_normal((l_t, d_emb)))
            taps = teacher.taps(Tensor(tokens.astype(np.float32)),
                                tap_layers=spec.teacher_layers)
            acoustic = (_upsample_time(tokens, l_s) @ mix
                        + spec.acoustic_noise * rng.standard_normal((l_s, spec.d_acoustic)))
            uid = f"u{idx:05d}"
            acoustic_file = f"tensors/{uid}.acoustic.stdt"
            write_tensor(split_dir / acoustic_file, acoustic.astype(np.float32))
            tap_files: dict[str, dict[str, str]] = {}
            for pos, layer in enumerate(taps.layers):
                att_file = f"tensors/{uid}.l{layer:02d}.att.stdt"
                hid_file = f"tensors/{uid}.l{layer:02d}.hid.stdt"
                write_tensor(split_dir / att_file, taps.att[pos])
                write_tensor(split_dir / hid_file, taps.hid[pos])
                tap_files[str(layer)] = {"att": att_file, "hid": hid_file}
            records.append(UtteranceRecord(
                id=uid, label=c, acoustic=acoustic_file, length=l_s,
                teacher_len=l_t, taps=tap_files))
        manifest = Manifest(
            name=f"synthetic-s{seed}-{split}",
            n_classes=k,
            d_acoustic=spec.d_acoustic,
            teacher={"n_layers": spec.teacher.n_layers,
                     "d_model": spec.teacher.d_model,
                     "layers": list(spec.teacher_layers)},
            utterances=records,
        )
        save_manifest(split_dir, manifest)
        info["splits"][split] = {"n": count, "dir": str(split_dir)}
    return info
