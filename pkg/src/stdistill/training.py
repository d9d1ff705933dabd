"""Optimization and the joint training loop for the distilled student.

One training thread owns the parameters: per batch the padded utterances run
through the encoder once, per-utterance losses are averaged in fixed order,
gradients are clipped by global norm, and bias-corrected Adam applies the
warmup-then-decay learning rate. Teacher taps are resampled to each
utterance's length once, up front, and reused as constants every epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .distill import DistillConfig, DistillHead, make_heads, resample_taps
from .encoder import EncoderConfig, LayerTaps, encode, init_encoder_params
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class NoamSchedule:
    """Warmup-then-inverse-sqrt learning rate, peaking at the warmup step."""
    d_model: int
    warmup_steps: int = 4000
    factor: float = 1.0


def lr_at(step: int, sched: NoamSchedule) -> float:
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    return (sched.factor * sched.d_model ** -0.5
            * min(step ** -0.5, step * sched.warmup_steps ** -1.5))


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def init(cls, params: dict[str, Tensor], beta1: float = 0.9,
             beta2: float = 0.98, eps: float = 1e-9) -> "AdamState":
        return cls(m={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
                   v={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update; clears gradients afterwards.

    Raises before touching any parameter if a gradient is non-finite.
    A missing gradient counts as zero.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=np.float32)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for '{name}'")
        grads[name] = g.astype(np.float64)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        m = state.beta1 * state.m[name].astype(np.float64) + (1 - state.beta1) * g
        v = state.beta2 * state.v[name].astype(np.float64) + (1 - state.beta2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(np.float32)
        p.grad = None


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# the student model bundle


@dataclass
class StudentModel:
    cfg: EncoderConfig
    dcfg: DistillConfig
    n_classes: int
    params: dict[str, Tensor]
    intent_pool: str = "mean"

    @property
    def heads(self) -> list[DistillHead]:
        names = sorted((n for n in self.params if n.startswith("dhead")),
                       key=lambda n: int(n[len("dhead"):].split(".")[0]))
        return [DistillHead(W_H=self.params[n]) for n in names]

    def trainable(self) -> dict[str, Tensor]:
        return self.params


def init_student(cfg: EncoderConfig, dcfg: DistillConfig, n_classes: int,
                 seed: int, intent_pool: str = "mean") -> StudentModel:
    """Seeded student: encoder, intent layer and distillation projections."""
    if intent_pool not in ("mean", "max"):
        raise ConfigError(f"intent_pool must be 'mean' or 'max', got {intent_pool!r}")
    if dcfg.n_student_layers != cfg.n_layers:
        raise ConfigError(f"layer map covers {dcfg.n_student_layers} student layers "
                          f"but the encoder has {cfg.n_layers}")
    if dcfg.s_dmodel != cfg.d_model:
        raise ConfigError(f"distill s_dmodel {dcfg.s_dmodel} != encoder d_model "
                          f"{cfg.d_model}")
    enc_ss, head_ss, intent_ss = np.random.SeedSequence([seed, 0x57D]).spawn(3)
    params = init_encoder_params(cfg, np.random.default_rng(enc_ss))
    bound = math.sqrt(6.0 / (cfg.d_model + n_classes))
    intent_rng = np.random.default_rng(intent_ss)
    params["intent.W"] = Tensor(
        intent_rng.uniform(-bound, bound, (cfg.d_model, n_classes)).astype(np.float32),
        requires_grad=True)
    params["intent.b"] = Tensor(np.zeros(n_classes, dtype=np.float32),
                                requires_grad=True)
    for j, head in enumerate(make_heads(dcfg, np.random.default_rng(head_ss))):
        params[f"dhead{j}.W"] = head.W_H
    return StudentModel(cfg=cfg, dcfg=dcfg, n_classes=n_classes, params=params,
                        intent_pool=intent_pool)


def _pooled_logits(final: Tensor, item: int, length: int,
                   model: StudentModel) -> Tensor:
    """Utterance representation (mean or max over valid steps) -> K logits."""
    rows = final[item, :length, :]
    pooled = T.mean(rows, axis=0) if model.intent_pool == "mean" \
        else T.amax(rows, axis=0)
    logits = T.matmul(T.reshape(pooled, (1, model.cfg.d_model)), model.params["intent.W"])
    return T.add(T.reshape(logits, (model.n_classes,)), model.params["intent.b"])


def _forward_seed(seed: int, epoch: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch_index, 0xF0]).generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    warmup_steps: int = 4000
    lr_factor: float = 1.0
    clip_norm: float = 5.0
    intent_pool: str = "mean"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.intent_pool not in ("mean", "max"):
            raise ConfigError(f"intent_pool must be 'mean' or 'max', "
                              f"got {self.intent_pool!r}")


def _check_dataset_compat(dataset: D.Dataset, model: StudentModel) -> None:
    """Fail before epoch 1 on any tap/layer-map inconsistency."""
    needed = set(model.dcfg.teacher_layers)
    have = set(dataset.manifest.teacher_layers)
    if not needed.issubset(have):
        raise ConfigError(f"layer map needs teacher layers {sorted(needed)} but the "
                          f"dataset provides {sorted(have)}")
    t_dmodel = int(dataset.manifest.teacher.get("d_model", model.dcfg.t_dmodel))
    if t_dmodel != model.dcfg.t_dmodel:
        raise ConfigError(f"distill t_dmodel {model.dcfg.t_dmodel} != dataset teacher "
                          f"width {t_dmodel}")
    if dataset.n_classes != model.n_classes:
        raise ConfigError(f"model has {model.n_classes} classes, dataset "
                          f"{dataset.n_classes}")
    for u in dataset.utterances:
        missing = needed - set(u.taps)
        if missing:
            raise ConfigError(f"utterance {u.id} lacks taps for teacher layers "
                              f"{sorted(missing)}")


def _resampled_targets(dataset: D.Dataset, dcfg: DistillConfig) -> dict[str, LayerTaps]:
    """Teacher taps pre-aligned to each utterance's own length (frozen)."""
    targets: dict[str, LayerTaps] = {}
    layers = dcfg.teacher_layers
    for u in dataset.utterances:
        raw = LayerTaps(layers=list(layers),
                        att=[T.constant(u.taps[l][0]) for l in layers],
                        hid=[T.constant(u.taps[l][1]) for l in layers],
                        valid_len=u.teacher_len)
        targets[u.id] = resample_taps(raw, u.length, dcfg.resample)
    return targets


def _stack_targets(batch: D.Batch, targets: dict[str, LayerTaps],
                   dcfg: DistillConfig) -> tuple[dict, dict, np.ndarray]:
    """Pad the per-utterance resampled teacher taps into batch arrays.

    Returns (att targets, hid targets, att weights): per mapped pair,
    att/hid arrays are [B, L_max, *] and the weight grid carries
    1/(B * pairs * l_b^2) over each utterance's valid block so a masked
    sum reproduces the mean of per-utterance MSE means.
    """
    b = len(batch)
    l_max = batch.acoustic.shape[1]
    n_pairs = len(dcfg.layer_map)
    att_t = {t: np.zeros((b, l_max, l_max), np.float32) for t, _ in dcfg.layer_map}
    hid_t = {t: np.zeros((b, l_max, dcfg.t_dmodel), np.float32)
             for t, _ in dcfg.layer_map}
    w_att = np.zeros((b, l_max, l_max), np.float32)
    for i in range(b):
        l = int(batch.lengths[i])
        taps = targets[batch.ids[i]]
        for pos, t_layer in enumerate(taps.layers):
            att_t[t_layer][i, :l, :l] = taps.att[pos].data
            hid_t[t_layer][i, :l, :] = taps.hid[pos].data
        w_att[i, :l, :l] = 1.0 / (b * n_pairs * l * l)
    return att_t, hid_t, w_att


def _batched_distill_losses(taps: LayerTaps, batch: D.Batch,
                            targets: dict[str, LayerTaps], model: StudentModel
                            ) -> tuple[Tensor, Tensor]:
    """Batch-mean attention and hidden losses, numerically equal (modulo
    float reassociation) to averaging the per-utterance loss_att/loss_hid."""
    dcfg = model.dcfg
    att_t, hid_t, w_att = _stack_targets(batch, targets, dcfg)
    heads = model.heads
    b, l_max = w_att.shape[:2]
    # hidden loss normalizes per utterance over l*d elements
    w_hid = np.zeros((b, l_max, 1), np.float32)
    for i in range(b):
        l = int(batch.lengths[i])
        w_hid[i, :l] = 1.0 / (b * len(dcfg.layer_map) * l * dcfg.t_dmodel)
    la_parts, lh_parts = [], []
    for idx, (t_layer, s_layer) in enumerate(dcfg.layer_map):
        s_att, s_hid = taps.layer(s_layer)
        d_att = T.subtract(s_att, T.constant(att_t[t_layer]))
        la_parts.append(T.sum_(T.multiply(T.multiply(d_att, d_att),
                                          T.constant(w_att))))
        head = heads[0] if len(heads) == 1 else heads[idx]
        proj = T.matmul(s_hid, head.W_H)
        d_hid = T.subtract(proj, T.constant(hid_t[t_layer]))
        lh_parts.append(T.sum_(T.multiply(T.multiply(d_hid, d_hid),
                                          T.constant(w_hid))))
    la = la_parts[0]
    for p in la_parts[1:]:
        la = T.add(la, p)
    lh = lh_parts[0]
    for p in lh_parts[1:]:
        lh = T.add(lh, p)
    return la, lh


def _batched_intent_loss(final: Tensor, batch: D.Batch, model: StudentModel
                         ) -> tuple[Tensor, np.ndarray]:
    """Batch-mean smoothed cross-entropy plus the raw logits for accuracy.

    Mean pooling runs as one masked matmul; max pooling falls back to
    per-utterance slices.
    """
    from .distill import smoothed_targets

    b, l_max = batch.mask.shape
    if model.intent_pool == "mean":
        w = (batch.mask[:, None, :] / batch.lengths[:, None, None]).astype(np.float32)
        pooled = T.reshape(T.matmul(T.constant(w), final), (b, model.cfg.d_model))
    else:
        rows = [T.amax(final[i, :int(batch.lengths[i]), :], axis=0, keepdims=True)
                for i in range(b)]
        pooled = T.concatenate(rows, axis=0)
    logits = T.add(T.matmul(pooled, model.params["intent.W"]), model.params["intent.b"])
    logp = T.log_softmax(logits)
    q = np.stack([smoothed_targets(int(y), model.n_classes, model.dcfg.label_smoothing)
                  for y in batch.labels]).astype(np.float32)
    li = T.scale(T.sum_(T.multiply(T.constant(q), logp)), -1.0 / b)
    return li, logits.data


def _objective(li: Tensor, la: Tensor, lh: Tensor, dcfg: DistillConfig) -> Tensor:
    """Same value as loss_total, but zero-weight terms stay out of the graph
    so baseline runs pay no backward cost for them."""
    parts = []
    for weight, term in ((dcfg.alpha1, li), (dcfg.alpha2, la), (dcfg.alpha3, lh)):
        if weight != 0.0:
            parts.append(T.scale(term, weight))
    if not parts:
        raise ConfigError("all loss weights are zero; nothing to optimize")
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return total


def train(dataset: D.Dataset, model: StudentModel, tcfg: TrainConfig,
          log_path=None, adam: AdamState | None = None, start_epoch: int = 1,
          start_step: int = 0) -> list[dict]:
    """Run the joint objective for epochs ``start_epoch..tcfg.epochs``.

    Returns one record per epoch with the averaged losses, learning rate and
    train accuracy; identical (config, seed) pairs produce identical logs.
    Pass the restored optimizer state and counters to resume a checkpoint.
    """
    _check_dataset_compat(dataset, model)
    targets = _resampled_targets(dataset, model.dcfg)
    sched = NoamSchedule(d_model=model.cfg.d_model, warmup_steps=tcfg.warmup_steps,
                         factor=tcfg.lr_factor)
    adam = adam or AdamState.init(model.params)
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        step = start_step
        for epoch in range(start_epoch, tcfg.epochs + 1):
            sums = {"total": 0.0, "intent": 0.0, "att": 0.0, "hid": 0.0}
            n_seen = 0
            n_correct = 0
            last_lr = 0.0
            for bidx, batch in enumerate(D.make_batches(dataset, tcfg.batch_size,
                                                        seed=tcfg.seed, shuffle=True,
                                                        epoch=epoch)):
                seed = _forward_seed(tcfg.seed, epoch, bidx)
                x = T.constant(batch.acoustic)
                final, taps = encode(x, batch.mask, model.cfg, model.params,
                                     mode="train", seed=seed)
                li, logits = _batched_intent_loss(final, batch, model)
                la, lh = _batched_distill_losses(taps, batch, targets, model)
                n_correct += int((np.argmax(logits, axis=1) == batch.labels).sum())
                total = _objective(li, la, lh, model.dcfg)
                T.backward(total)
                clip_global_norm(model.params, tcfg.clip_norm)
                step += 1
                last_lr = lr_at(step, sched)
                adam_step(model.params, adam, last_lr)
                b = len(batch)
                n_seen += b
                sums["total"] += total.item() * b
                sums["intent"] += li.item() * b
                sums["att"] += la.item() * b
                sums["hid"] += lh.item() * b
            record = {
                "epoch": epoch,
                "step": step,
                "lr": last_lr,
                "loss_total": sums["total"] / n_seen,
                "loss_intent": sums["intent"] / n_seen,
                "loss_att": sums["att"] / n_seen,
                "loss_hid": sums["hid"] / n_seen,
                "train_accuracy": n_correct / n_seen,
            }
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    model._adam = adam  # kept for checkpointing
    model._sched_step = step
    return records


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, dict[str, int]]
    n: int

    def as_record(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())}}


def evaluate(dataset: D.Dataset, model: StudentModel, batch_size: int = 32,
             snr_db: float | None = None, noise_seed: int = 0) -> EvalResult:
    """Top-1 intent accuracy in eval mode (dropout off), with optional
    embedding-level noise injection at a fixed SNR."""
    if len(dataset) == 0:
        raise ConfigError("evaluate: empty dataset")
    per_class = {c: {"correct": 0, "total": 0} for c in range(dataset.n_classes)}
    n_correct = 0
    index = 0
    for batch in D.make_batches(dataset, batch_size, shuffle=False):
        acoustic = batch.acoustic
        if snr_db is not None:
            acoustic = acoustic.copy()
            for i in range(len(batch)):
                length = int(batch.lengths[i])
                acoustic[i, :length] = D.inject_noise(
                    acoustic[i, :length], snr_db,
                    seed=int(np.random.SeedSequence(
                        [noise_seed, index + i, 0x901E]).generate_state(1)[0]))
        final, _ = encode(T.constant(acoustic), batch.mask, model.cfg, model.params,
                          mode="eval", tap_layers=[model.cfg.n_layers])
        for i in range(len(batch)):
            logits = _pooled_logits(final, i, int(batch.lengths[i]), model)
            pred = int(np.argmax(logits.data))
            label = int(batch.labels[i])
            per_class[label]["total"] += 1
            per_class[label]["correct"] += int(pred == label)
            n_correct += int(pred == label)
        index += len(batch)
    return EvalResult(accuracy=n_correct / len(dataset), per_class=per_class,
                      n=len(dataset))


# ---------------------------------------------------------------------------
# checkpointing


CHECKPOINT_FORMAT = "stdistill-checkpoint"


def save_checkpoint(ckpt_dir, model: StudentModel, adam: AdamState | None = None,
                    step: int = 0, seed: int = 0, extra: dict | None = None) -> Path:
    """Write parameters, optimizer state and configs; byte-stable across
    save/load/save round trips."""
    root = Path(ckpt_dir)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    adam = adam or getattr(model, "_adam", None) or AdamState.init(model.params)
    tensors: dict[str, str] = {}

    def put(prefix: str, name: str, arr) -> None:
        rel = f"tensors/{prefix}__{name}.stdt"
        D.write_tensor(root / rel, arr)
        tensors[f"{prefix}/{name}"] = rel

    for name, p in model.params.items():
        put("param", name, p.data)
    for name in model.params:
        put("adam_m", name, adam.m[name])
        put("adam_v", name, adam.v[name])
    dcfg = asdict(model.dcfg)
    dcfg["layer_map"] = [list(p) for p in model.dcfg.layer_map]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "step": int(step or getattr(model, "_sched_step", 0)),
        "seed": int(seed),
        "n_classes": model.n_classes,
        "intent_pool": model.intent_pool,
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps},
        "student_cfg": asdict(model.cfg),
        "distill_cfg": dcfg,
        "extra": extra or {},
        "tensors": tensors,
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return root


def load_checkpoint(ckpt_dir) -> tuple[StudentModel, AdamState, dict]:
    """Restore a model and optimizer state; the returned dict carries the
    manifest metadata (step, seed, extra)."""
    root = Path(ckpt_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest under {ckpt_dir}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    cfg = EncoderConfig(**doc["student_cfg"])
    draw = dict(doc["distill_cfg"])
    draw["layer_map"] = [tuple(p) for p in draw["layer_map"]]
    dcfg = DistillConfig(**draw)
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for key, rel in doc["tensors"].items():
        prefix, name = key.split("/", 1)
        arr = D.read_tensor(root / rel).data
        if prefix == "param":
            params[name] = Tensor(arr.copy(), requires_grad=True)
        elif prefix == "adam_m":
            m[name] = arr.copy()
        elif prefix == "adam_v":
            v[name] = arr.copy()
    missing = (set(params) - set(m)) | (set(params) - set(v))
    if missing:
        raise CheckpointError(f"optimizer state missing for {sorted(missing)}")
    adam = AdamState(m=m, v=v, step=int(doc["adam"]["step"]),
                     beta1=float(doc["adam"]["beta1"]),
                     beta2=float(doc["adam"]["beta2"]),
                     eps=float(doc["adam"]["eps"]))
    model = StudentModel(cfg=cfg, dcfg=dcfg, n_classes=int(doc["n_classes"]),
                         params=params, intent_pool=doc.get("intent_pool", "mean"))
    model._adam = adam
    model._sched_step = int(doc["step"])
    meta = {"step": int(doc["step"]), "seed": int(doc["seed"]),
            "extra": doc.get("extra", {})}
    return model, adam, meta
