"""Layer-mapped knowledge distillation losses and the weighted training objective.

A deep frozen teacher encoder is aligned with a shallow student by grouping
teacher layers into blocks and pairing the last layer of each block with one
student layer. For each pair, two losses are computed on the taps:

  - attention transfer: MSE between the student's head-averaged attention
    matrix and the teacher's, after resampling the teacher matrix onto the
    student's sequence length;
  - hidden-state transfer: MSE between the student hidden sequence projected
    through a learnable width-matching matrix and the (time-resampled)
    teacher hidden sequence.

The classification loss is label-smoothed cross-entropy on the intent
logits, and the total objective is the weighted sum of the three.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import LayerTaps
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor


def layer_map_uniform(n_teacher: int, n_student: int) -> list[tuple[int, int]]:
    """Block-uniform layer map: pair the last teacher layer of each of
    ``n_student`` equal blocks with the corresponding student layer.

    Both indices are 1-based. Requires ``n_teacher`` divisible by
    ``n_student``.
    """
    if n_student < 1 or n_teacher < n_student:
        raise ConfigError(f"need n_teacher >= n_student >= 1, "
                          f"got ({n_teacher}, {n_student})")
    if n_teacher % n_student != 0:
        raise ConfigError(
            f"{n_teacher} teacher layers do not split into {n_student} equal "
            f"blocks; pass an explicit layer_map instead")
    block = n_teacher // n_student
    return [(block * i, i) for i in range(1, n_student + 1)]


@dataclass
class DistillConfig:
    """Loss weights, layer map and projection dims for the distillation objective."""
    alpha1: float = 0.625
    alpha2: float = 0.125
    alpha3: float = 0.250
    layer_map: list[tuple[int, int]] = field(
        default_factory=lambda: layer_map_uniform(12, 4))
    resample: str = "bilinear"
    label_smoothing: float = 0.1
    s_dmodel: int = 512
    t_dmodel: int = 768
    shared_head: bool = False

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError(f"label_smoothing must be in [0, 0.5), "
                              f"got {self.label_smoothing}")
        if self.resample not in ("bilinear", "truncate_pad"):
            raise ConfigError(f"unknown resample mode {self.resample!r}")
        self.layer_map = [tuple(p) for p in self.layer_map]
        validate_layer_map(self.layer_map)

    @property
    def n_student_layers(self) -> int:
        return self.layer_map[-1][1]

    @property
    def teacher_layers(self) -> list[int]:
        return [t for t, _ in self.layer_map]


def validate_layer_map(layer_map: list[tuple[int, int]]) -> None:
    """Student side must be exactly 1..N_S; both coordinates strictly increase."""
    if not layer_map:
        raise ConfigError("layer_map must not be empty")
    students = [s for _, s in layer_map]
    teachers = [t for t, _ in layer_map]
    if students != list(range(1, len(layer_map) + 1)):
        raise ConfigError(f"student layers in map must be exactly 1..{len(layer_map)}, "
                          f"got {students}")
    if any(b <= a for a, b in zip(teachers, teachers[1:])):
        raise ConfigError(f"teacher layers in map must strictly increase, got {teachers}")
    if teachers[0] < 1:
        raise ConfigError("teacher layer indices are 1-based")


@dataclass
class DistillHead:
    """Learnable width-matching projection from student to teacher hidden size."""
    W_H: Tensor

    @classmethod
    def init(cls, s_dmodel: int, t_dmodel: int, rng: np.random.Generator) -> "DistillHead":
        bound = math.sqrt(6.0 / (s_dmodel + t_dmodel))
        w = rng.uniform(-bound, bound, size=(s_dmodel, t_dmodel)).astype(np.float32)
        return cls(W_H=Tensor(w, requires_grad=True))


def make_heads(cfg: DistillConfig, rng: np.random.Generator) -> list[DistillHead]:
    """One projection per mapped pair, or a single shared one."""
    n = 1 if cfg.shared_head else len(cfg.layer_map)
    return [DistillHead.init(cfg.s_dmodel, cfg.t_dmodel, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# teacher-tap resampling (targets are frozen, so this is plain numpy)


def _corner_positions(n_src: int, n_dst: int) -> np.ndarray:
    """Corner-aligned sample positions of ``n_dst`` points over ``n_src`` bins."""
    if n_dst == 1:
        return np.zeros(1)
    return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)


def _interp_rows(values: np.ndarray, l_out: int) -> np.ndarray:
    """Linear interpolation along axis 0 at corner-aligned positions."""
    l_in = values.shape[0]
    pos = _corner_positions(l_in, l_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, l_in - 1)
    frac = (pos - lo)[:, None]
    return values[lo] * (1 - frac) + values[hi] * frac


def resample_attention(t_att: Tensor | np.ndarray, l_s: int) -> Tensor:
    """Resample a row-stochastic [L_t x L_t] attention map onto an
    [l_s x l_s] grid by corner-aligned bilinear interpolation, then
    renormalize each row to sum 1. Returns a frozen tensor."""
    data = t_att.data if isinstance(t_att, Tensor) else np.asarray(t_att)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ShapeError(f"attention map must be square, got {data.shape}")
    if l_s < 1:
        raise ShapeError(f"target length must be >= 1, got {l_s}")
    if not np.isfinite(data).all():
        raise NonFiniteError("attention map contains non-finite values")
    resampled = _interp_rows(_interp_rows(data.astype(np.float64), l_s).T, l_s).T
    rows = resampled.sum(axis=1, keepdims=True)
    return T.constant((resampled / rows).astype(np.float32))


def resample_hidden(t_hid: Tensor | np.ndarray, l_s: int) -> Tensor:
    """Per-dimension linear time interpolation of [L_t x d] onto [l_s x d]."""
    data = t_hid.data if isinstance(t_hid, Tensor) else np.asarray(t_hid)
    if data.ndim != 2:
        raise ShapeError(f"hidden sequence must be 2-d, got {data.shape}")
    if l_s < 1:
        raise ShapeError(f"target length must be >= 1, got {l_s}")
    if not np.isfinite(data).all():
        raise NonFiniteError("hidden sequence contains non-finite values")
    return T.constant(_interp_rows(data.astype(np.float64), l_s).astype(np.float32))


def _truncate_pad_attention(data: np.ndarray, l_s: int) -> Tensor:
    """Ablation alternative: crop to the leading block (renormalizing rows),
    pad missing rows with self-attention deltas."""
    l_t = data.shape[0]
    out = np.zeros((l_s, l_s), dtype=np.float64)
    keep = min(l_t, l_s)
    block = data[:keep, :keep].astype(np.float64)
    rows = block.sum(axis=1, keepdims=True)
    # a cropped row can lose all its mass; fall back to uniform there
    out[:keep, :keep] = np.where(rows > 1e-12, block / np.maximum(rows, 1e-12),
                                 1.0 / keep)
    for i in range(keep, l_s):
        out[i, i] = 1.0
    return T.constant(out.astype(np.float32))


def _truncate_pad_hidden(data: np.ndarray, l_s: int) -> Tensor:
    l_t, d = data.shape
    out = np.zeros((l_s, d), dtype=data.dtype)
    keep = min(l_t, l_s)
    out[:keep] = data[:keep]
    return T.constant(np.asarray(out, dtype=np.float32))


def resample_taps(t_taps: LayerTaps, l_s: int, mode: str = "bilinear") -> LayerTaps:
    """Teacher taps aligned to the student's sequence length (frozen)."""
    if mode == "bilinear":
        att = [resample_attention(a, l_s) for a in t_taps.att]
        hid = [resample_hidden(h, l_s) for h in t_taps.hid]
    elif mode == "truncate_pad":
        att = [_truncate_pad_attention(a.data, l_s) for a in t_taps.att]
        hid = [_truncate_pad_hidden(h.data, l_s) for h in t_taps.hid]
    else:
        raise ConfigError(f"unknown resample mode {mode!r}")
    return LayerTaps(layers=list(t_taps.layers), att=att, hid=hid, valid_len=l_s)


# ---------------------------------------------------------------------------
# losses


def _valid_att(taps: LayerTaps, layer: int) -> Tensor:
    att, _ = taps.layer(layer)
    l = taps.valid_len
    return att[:l, :l] if att.shape[0] != l else att


def _valid_hid(taps: LayerTaps, layer: int) -> Tensor:
    _, hid = taps.layer(layer)
    l = taps.valid_len
    return hid[:l, :] if hid.shape[0] != l else hid


def loss_att(s_taps: LayerTaps, t_taps: LayerTaps,
             layer_map: list[tuple[int, int]],
             resample: str = "bilinear") -> Tensor:
    """Attention distillation: mean over mapped pairs of the elementwise MSE
    between student attention and the length-aligned teacher attention.

    Teacher taps are treated as constants; gradient reaches only the
    student side.
    """
    l_s = s_taps.valid_len
    terms = []
    for t_layer, s_layer in layer_map:
        s_att = _valid_att(s_taps, s_layer)
        t_att = _valid_att(t_taps, t_layer)
        if t_att.shape[0] != l_s:
            if resample == "bilinear":
                t_att = resample_attention(t_att, l_s)
            else:
                t_att = _truncate_pad_attention(t_att.data, l_s)
        terms.append(T.mse(s_att, t_att.detach()))
    return _mean_scalars(terms)


def loss_hid(s_taps: LayerTaps, t_taps: LayerTaps,
             layer_map: list[tuple[int, int]], heads: list[DistillHead],
             resample: str = "bilinear") -> Tensor:
    """Hidden-state distillation: per pair, MSE between the projected student
    hidden sequence and the length-aligned teacher hidden sequence; mean over
    pairs. Gradient reaches the student and every projection used."""
    if len(heads) not in (1, len(layer_map)):
        raise ConfigError(f"need one projection head or one per pair "
                          f"({len(layer_map)}), got {len(heads)}")
    l_s = s_taps.valid_len
    terms = []
    for idx, (t_layer, s_layer) in enumerate(layer_map):
        head = heads[0] if len(heads) == 1 else heads[idx]
        s_hid = _valid_hid(s_taps, s_layer)
        if s_hid.shape[-1] != head.W_H.shape[0]:
            raise ShapeError(f"projection expects student width {head.W_H.shape[0]}, "
                             f"taps have {s_hid.shape[-1]}")
        t_hid = _valid_hid(t_taps, t_layer)
        if t_hid.shape[-1] != head.W_H.shape[1]:
            raise ShapeError(f"projection produces width {head.W_H.shape[1]}, "
                             f"teacher taps have {t_hid.shape[-1]}")
        if t_hid.shape[0] != l_s:
            if resample == "bilinear":
                t_hid = resample_hidden(t_hid, l_s)
            else:
                t_hid = _truncate_pad_hidden(t_hid.data, l_s)
        terms.append(T.mse(T.matmul(s_hid, head.W_H), t_hid.detach()))
    return _mean_scalars(terms)


def smoothed_targets(y: int, n_classes: int, smoothing: float) -> np.ndarray:
    """Label-smoothed target distribution: 1-eps on the true class,
    eps/(K-1) elsewhere."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if not 0 <= y < n_classes:
        raise ConfigError(f"label {y} outside [0, {n_classes})")
    q = np.full(n_classes, smoothing / (n_classes - 1), dtype=np.float64)
    q[y] = 1.0 - smoothing
    return q


def loss_intent(logits: Tensor, y: int, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy between log-softmax(logits) and the smoothed target."""
    if logits.ndim != 1:
        raise ShapeError(f"intent logits must be a vector, got {logits.shape}")
    q = smoothed_targets(int(y), logits.shape[0], smoothing)
    logp = T.log_softmax(logits)
    return T.scale(T.sum_(T.multiply(T.constant(q.astype(np.float32)), logp)), -1.0)


def loss_total(l_intent: Tensor, l_att: Tensor, l_hid: Tensor,
               cfg: DistillConfig) -> Tensor:
    """Weighted sum of the three objective terms."""
    return T.add(T.add(T.scale(l_intent, cfg.alpha1), T.scale(l_att, cfg.alpha2)),
                 T.scale(l_hid, cfg.alpha3))


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))
