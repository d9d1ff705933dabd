"""Transformer encoder shared by the trainable student and the frozen teacher.

Each layer applies multi-head self-attention and a position-wise relu FFN,
both in post-norm residual form. A forward pass exposes per-layer taps: the
head-averaged post-softmax attention matrix and the layer's output hidden
sequence, which downstream distillation losses compare against teacher taps.

All sequence tensors are batched as [B, L, d]; padded positions are masked
out of attention (keys) and zeroed in every tap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    d_input: int = 256
    dropout_p: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "d_input", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"EncoderConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def student_config(**overrides) -> EncoderConfig:
    """Student defaults: 4 layers, 512 wide, 8 heads over 256-dim acoustic input."""
    return EncoderConfig(**{**dict(n_layers=4, d_model=512, n_heads=8, d_ff=2048,
                                   d_input=256), **overrides})


def teacher_config(**overrides) -> EncoderConfig:
    """Teacher defaults: 12 layers, 768 wide, 12 heads."""
    return EncoderConfig(**{**dict(n_layers=12, d_model=768, n_heads=12, d_ff=3072,
                                   d_input=768), **overrides})


@dataclass
class LayerTaps:
    """Per-layer distillation taps for one utterance (or one batch).

    ``att[i]`` is the head-averaged attention matrix of tapped layer
    ``layers[i]`` and ``hid[i]`` that layer's output sequence. Rows/columns
    beyond ``valid_len`` are exactly zero.
    """
    layers: list[int]
    att: list[Tensor]
    hid: list[Tensor]
    valid_len: int

    def __post_init__(self):
        if not (len(self.layers) == len(self.att) == len(self.hid)):
            raise ShapeError("LayerTaps lists must have equal length")

    def layer(self, index: int) -> tuple[Tensor, Tensor]:
        """The (att, hid) pair for 1-based layer ``index``."""
        try:
            pos = self.layers.index(index)
        except ValueError:
            raise ShapeError(f"layer {index} is not present in taps "
                             f"(tapped layers: {self.layers})") from None
        return self.att[pos], self.hid[pos]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        requires_grad: bool = True) -> dict[str, Tensor]:
    """Seeded parameter set: glorot-uniform linear maps, zero biases,
    unit/zero layer-norm affines."""
    d, dff = cfg.d_model, cfg.d_ff

    def param(arr):
        return Tensor(arr, requires_grad=requires_grad)

    params: dict[str, Tensor] = {
        "in_proj.W": param(_glorot(rng, cfg.d_input, d)),
        "in_proj.b": param(np.zeros(d, dtype=np.float32)),
    }
    for i in range(1, cfg.n_layers + 1):
        pre = f"layer{i}"
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[f"{pre}.{name}"] = param(_glorot(rng, d, d))
            params[f"{pre}.{name[1]}b"] = param(np.zeros(d, dtype=np.float32))
        params[f"{pre}.ln1.g"] = param(np.ones(d, dtype=np.float32))
        params[f"{pre}.ln1.b"] = param(np.zeros(d, dtype=np.float32))
        params[f"{pre}.ffn.W1"] = param(_glorot(rng, d, dff))
        params[f"{pre}.ffn.b1"] = param(np.zeros(dff, dtype=np.float32))
        params[f"{pre}.ffn.W2"] = param(_glorot(rng, dff, d))
        params[f"{pre}.ffn.b2"] = param(np.zeros(d, dtype=np.float32))
        params[f"{pre}.ln2.g"] = param(np.ones(d, dtype=np.float32))
        params[f"{pre}.ln2.b"] = param(np.zeros(d, dtype=np.float32))
    return params


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table: even dims sin(t / 10000^(2i/d)), odd dims cos."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table.astype(dtype)


def input_project(embeddings: Tensor, cfg: EncoderConfig, params: dict[str, Tensor],
                  mode: str = "eval", seed: int = 0) -> Tensor:
    """Affine map to d_model plus sinusoidal position encoding and dropout.

    Accepts [L, d_input] or [B, L, d_input].
    """
    squeeze = embeddings.ndim == 2
    x = T.reshape(embeddings, (1,) + embeddings.shape) if squeeze else embeddings
    if x.shape[-1] != cfg.d_input:
        raise ShapeError(f"input width {x.shape[-1]} != configured d_input {cfg.d_input}")
    length = x.shape[1]
    if length > cfg.max_len:
        raise ShapeError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    h = T.add(T.matmul(x, params["in_proj.W"]), params["in_proj.b"])
    pe = T.constant(positional_encoding(length, cfg.d_model, h.dtype))
    h = T.add(h, pe)
    if mode == "train" and cfg.dropout_p > 0:
        h = T.dropout(h, cfg.dropout_p, seed, "in_proj.drop")
    return T.reshape(h, h.shape[1:]) if squeeze else h


def _heads_split(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, length, _ = x.shape
    return T.transpose(T.reshape(x, (b, length, n_heads, d_head)), 1, 2)


def _heads_join(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return T.reshape(T.transpose(x, 1, 2), (b, length, h * dh))


def encode(x: Tensor, mask, cfg: EncoderConfig, params: dict[str, Tensor],
           mode: str = "eval", seed: int = 0,
           tap_layers: list[int] | None = None) -> tuple[Tensor, LayerTaps]:
    """Run the encoder; returns the final hidden sequence and layer taps.

    ``x`` is [L, d_input] with boolean ``mask`` [L], or batched
    [B, L, d_input] with mask [B, L]. Attention never reads masked keys
    and all tap rows at masked positions are exactly zero. ``eval`` mode
    disables dropout.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
    if not mask.any(axis=1).all():
        raise ShapeError("every sequence in the batch needs at least one valid position")
    tap_layers = list(range(1, cfg.n_layers + 1)) if tap_layers is None else tap_layers
    for i in tap_layers:
        if not 1 <= i <= cfg.n_layers:
            raise ConfigError(f"tap layer {i} outside 1..{cfg.n_layers}")

    b, length = mask.shape
    key_mask = np.broadcast_to(mask[:, None, None, :], (b, cfg.n_heads, length, length))
    qmask = T.constant(mask[:, :, None].astype(np.float32))
    att_qmask = T.constant(mask[:, :, None].astype(np.float32))
    inv_sqrt_dh = 1.0 / math.sqrt(cfg.d_head)
    train = mode == "train" and cfg.dropout_p > 0

    h = input_project(x, cfg, params, mode=mode, seed=seed)
    att_taps: dict[int, Tensor] = {}
    hid_taps: dict[int, Tensor] = {}
    for i in range(1, cfg.n_layers + 1):
        pre = f"layer{i}"
        try:
            q = _heads_split(T.add(T.matmul(h, params[f"{pre}.Wq"]), params[f"{pre}.qb"]),
                             cfg.n_heads, cfg.d_head)
            k = _heads_split(T.add(T.matmul(h, params[f"{pre}.Wk"]), params[f"{pre}.kb"]),
                             cfg.n_heads, cfg.d_head)
            v = _heads_split(T.add(T.matmul(h, params[f"{pre}.Wv"]), params[f"{pre}.vb"]),
                             cfg.n_heads, cfg.d_head)
            scores = T.scale(T.matmul(q, T.transpose(k, -2, -1)), inv_sqrt_dh)
            att = T.softmax_masked(scores, key_mask)
            if i in tap_layers:
                # mean pooling over heads; zero out padded query rows
                att_taps[i] = T.multiply(T.mean(att, axis=1), att_qmask)
            ctx = T.add(T.matmul(_heads_join(T.matmul(att, v)), params[f"{pre}.Wo"]),
                        params[f"{pre}.ob"])
            if train:
                ctx = T.dropout(ctx, cfg.dropout_p, seed, f"{pre}.attn.drop")
            h = T.layer_norm(T.add(h, ctx), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
            h = T.multiply(h, qmask)
            ff = T.matmul(T.relu(T.add(T.matmul(h, params[f"{pre}.ffn.W1"]),
                                       params[f"{pre}.ffn.b1"])),
                          params[f"{pre}.ffn.W2"])
            ff = T.add(ff, params[f"{pre}.ffn.b2"])
            if train:
                ff = T.dropout(ff, cfg.dropout_p, seed, f"{pre}.ffn.drop")
            h = T.layer_norm(T.add(h, ff), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
            h = T.multiply(h, qmask)
        except NonFiniteError as err:
            raise NonFiniteError(f"layer {i}: {err}") from err
        if i in tap_layers:
            hid_taps[i] = h

    valid_len = int(mask.sum(axis=1)[0]) if b == 1 else -1
    if squeeze:
        final = T.reshape(h, h.shape[1:])
        taps = LayerTaps(
            layers=list(tap_layers),
            att=[T.reshape(att_taps[i], att_taps[i].shape[1:]) for i in tap_layers],
            hid=[T.reshape(hid_taps[i], hid_taps[i].shape[1:]) for i in tap_layers],
            valid_len=valid_len,
        )
        return final, taps
    taps = LayerTaps(layers=list(tap_layers),
                     att=[att_taps[i] for i in tap_layers],
                     hid=[hid_taps[i] for i in tap_layers],
                     valid_len=valid_len)
    return h, taps


def slice_taps(taps: LayerTaps, item: int, valid_len: int) -> LayerTaps:
    """Per-utterance taps out of a batched forward: exact-length views."""
    return LayerTaps(
        layers=list(taps.layers),
        att=[a[item, :valid_len, :valid_len] for a in taps.att],
        hid=[h[item, :valid_len, :] for h in taps.hid],
        valid_len=valid_len,
    )


class FrozenTeacher:
    """A synthetic stand-in teacher: seeded random encoder, never updated.

    Taps are deterministic functions of (seed, inputs) and carry no
    gradient, mirroring a fixed pretrained model.
    """

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        self.cfg = cfg or teacher_config()
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EAC]))
        self.params = init_encoder_params(self.cfg, rng, requires_grad=False)

    def taps(self, token_embeddings: Tensor, mask=None,
             tap_layers: list[int] | None = None) -> LayerTaps:
        """Eval-mode taps for one embedding sequence [L, d_input]."""
        if mask is None:
            mask = np.ones(token_embeddings.shape[0], dtype=bool)
        _, taps = encode(token_embeddings, mask, self.cfg, self.params,
                         mode="eval", tap_layers=tap_layers)
        return taps


def frozen_teacher_taps(token_embeddings: Tensor, mask=None,
                        cfg: EncoderConfig | None = None, seed: int = 0,
                        tap_layers: list[int] | None = None) -> LayerTaps:
    """One-shot convenience wrapper over FrozenTeacher (teacher defaults)."""
    return FrozenTeacher(cfg, seed).taps(token_embeddings, mask, tap_layers)
