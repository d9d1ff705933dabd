"""Finite-difference verification suite covering every differentiable path.

Each check perturbs one tensor of a scalar-valued function and compares the
analytic gradient against central differences at relative tolerance 1e-4.
The suite covers all primitives on several random shapes, the mini encoder
end to end, and all three objective terms including the hidden projection.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .distill import (DistillHead, layer_map_uniform, loss_att, loss_hid,
                      loss_intent, resample_taps)
from .encoder import EncoderConfig, LayerTaps, encode, init_encoder_params
from .tensor import GradCheckReport, Tensor, grad_check

TOL = 1e-4
H = 1e-4  # small step: the float64 oracle keeps rounding error negligible


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def primitive_checks(seed: int = 0, tol: float = TOL) -> list[GradCheckReport]:
    """Every autodiff primitive on three random shapes apiece."""
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, f, x):
        reports.append(grad_check(f, Tensor(x), h=H, tol=tol, name=name))

    shapes2d = [(2, 3), (4, 4), (1, 5)]
    for s in shapes2d:
        other = Tensor(_rand(rng, *s))
        check(f"add{s}", lambda t, o=other: T.sum_(T.multiply(T.add(t, o), o)), _rand(rng, *s))
        check(f"subtract{s}", lambda t, o=other: T.sum_(T.multiply(T.subtract(t, o), o)),
              _rand(rng, *s))
        check(f"multiply{s}", lambda t, o=other: T.sum_(T.multiply(t, o)), _rand(rng, *s))
        check(f"scale{s}", lambda t: T.sum_(T.multiply(T.scale(t, 1.7), T.scale(t, 0.3))),
              _rand(rng, *s))
        check(f"relu{s}", lambda t: T.sum_(T.multiply(T.relu(t), T.relu(t))),
              _rand(rng, *s) + 0.05)  # keep clear of the kink
    for m, k, n in [(2, 3, 4), (3, 3, 3), (5, 2, 6)]:
        b = Tensor(_rand(rng, k, n))
        check(f"matmul({m}x{k}x{n})",
              lambda t, b=b: T.mean(T.multiply(T.matmul(t, b), T.matmul(t, b))),
              _rand(rng, m, k))
    for s in [(3, 4), (2, 2, 3), (4, 6)]:
        check(f"transpose{s}", lambda t: T.sum_(T.multiply(T.transpose(t), T.transpose(t))),
              _rand(rng, *s))
        check(f"reshape{s}", lambda t: T.sum_(T.multiply(T.reshape(t, (t.size,)),
                                                         T.reshape(t, (t.size,)))),
              _rand(rng, *s))
        check(f"mean{s}", lambda t: T.sum_(T.multiply(T.mean(t, axis=0), T.mean(t, axis=0))),
              _rand(rng, *s))
        check(f"sum{s}", lambda t: T.sum_(T.multiply(T.sum_(t, axis=-1),
                                                     T.sum_(t, axis=-1))),
              _rand(rng, *s))
        check(f"slice{s}", lambda t: T.sum_(T.multiply(t[1:, 1:], t[1:, 1:])),
              _rand(rng, max(s[0], 2), max(s[-1], 2)))
    for s in [(2, 3), (3, 2), (4, 4)]:
        other = Tensor(_rand(rng, *s))
        check(f"concatenate{s}",
              lambda t, o=other: T.sum_(T.multiply(T.concatenate([t, o], axis=0),
                                                   T.concatenate([t, o], axis=0))),
              _rand(rng, *s))
        check(f"amax{s}", lambda t: T.sum_(T.multiply(T.amax(t, axis=-1),
                                                      T.amax(t, axis=-1))),
              _spread(rng, s))
    for rows, cols in [(3, 4), (5, 5), (2, 7)]:
        mask = np.ones((rows, cols), dtype=bool)
        mask[:, -1] = False
        w = Tensor(_rand(rng, rows, cols))
        check(f"softmax_masked({rows}x{cols})",
              lambda t, m=mask, w=w: T.sum_(T.multiply(T.softmax_masked(t, m), w)),
              _rand(rng, rows, cols))
        check(f"log_softmax({rows}x{cols})",
              lambda t, w=w: T.sum_(T.multiply(T.log_softmax(t), w)),
              _rand(rng, rows, cols))
    for rows, d in [(3, 4), (2, 8), (5, 3)]:
        gamma = Tensor(1.0 + 0.1 * _rand(rng, d))
        beta = Tensor(0.1 * _rand(rng, d))
        w = Tensor(_rand(rng, rows, d))
        check(f"layer_norm({rows}x{d})",
              lambda t, g=gamma, b=beta, w=w: T.sum_(T.multiply(T.layer_norm(t, g, b), w)),
              _rand(rng, rows, d))
        check(f"layer_norm_gamma({rows}x{d})",
              lambda g, t=Tensor(_rand(rng, rows, d)), b=beta, w=w:
                  T.sum_(T.multiply(T.layer_norm(t, g, b), w)),
              1.0 + 0.1 * _rand(rng, d))
    return reports


def _spread(rng, shape):
    """Values with a clear per-row maximum so amax ties do not confuse FD."""
    x = _rand(rng, *shape)
    x += np.arange(x.shape[-1]) * 0.5
    return x


def encoder_check(seed: int = 0, tol: float = TOL) -> list[GradCheckReport]:
    """End-to-end gradient through a 2-layer mini encoder for every parameter."""
    cfg = EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, d_input=6,
                        dropout_p=0.0, max_len=16)
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng)
    x = Tensor(rng.standard_normal((5, cfg.d_input)))
    mask = np.array([True, True, True, True, False])
    w = Tensor(rng.standard_normal((5, cfg.d_model)))

    reports = []
    for name in params:
        def f(p, name=name):
            trial = dict(params)
            trial[name] = p
            final, _ = encode(x, mask, cfg, trial, mode="eval")
            return T.sum_(T.multiply(final, w))
        reports.append(grad_check(f, params[name], h=H, tol=tol, name=f"encoder.{name}"))
    return reports


def _random_taps(rng, layers, l, d) -> LayerTaps:
    att = []
    for _ in layers:
        raw = np.abs(rng.standard_normal((l, l))) + 0.1
        att.append(T.constant(raw / raw.sum(axis=1, keepdims=True)))
    hid = [T.constant(rng.standard_normal((l, d))) for _ in layers]
    return LayerTaps(layers=list(layers), att=att, hid=hid, valid_len=l)


def loss_checks(seed: int = 0, tol: float = TOL) -> list[GradCheckReport]:
    """The three objective terms, including the hidden projection W_H."""
    rng = np.random.default_rng(seed)
    reports = []

    # attention loss w.r.t. student attention taps (8x8, two pairs)
    layer_map = layer_map_uniform(4, 2)
    t_taps = resample_taps(_random_taps(rng, [2, 4], 6, 5), 8)
    s_att_raw = np.abs(rng.standard_normal((2, 8, 8))) + 0.1

    def f_att(flat):
        att = [T.softmax_masked(flat[i], np.ones((8, 8), bool)) for i in range(2)]
        hid = [T.constant(np.zeros((8, 5), np.float32)) for _ in range(2)]
        s_taps = LayerTaps(layers=[1, 2], att=att, hid=hid, valid_len=8)
        return loss_att(s_taps, t_taps, layer_map)

    reports.append(grad_check(f_att, Tensor(s_att_raw), h=H, tol=tol, name="loss_att"))

    # hidden loss w.r.t. the student hidden taps and w.r.t. W_H (dims 3 -> 5)
    pair_map = layer_map_uniform(1, 1)
    t_single = _random_taps(rng, [1], 4, 5)
    head = DistillHead.init(3, 5, rng)
    s_hid_raw = rng.standard_normal((4, 3))

    def f_hid(s):
        s_taps = LayerTaps(layers=[1], att=[T.constant(np.full((4, 4), 0.25, np.float32))],
                           hid=[s], valid_len=4)
        return loss_hid(s_taps, t_single, pair_map, [head])

    reports.append(grad_check(f_hid, Tensor(s_hid_raw), h=H, tol=tol, name="loss_hid.s_hid"))

    s_fixed = T.constant(s_hid_raw)

    def f_wh(w):
        s_taps = LayerTaps(layers=[1], att=[T.constant(np.full((4, 4), 0.25, np.float32))],
                           hid=[s_fixed], valid_len=4)
        return loss_hid(s_taps, t_single, pair_map, [DistillHead(W_H=w)])

    reports.append(grad_check(f_wh, head.W_H, h=H, tol=tol, name="loss_hid.W_H"))

    def f_intent(logits):
        return loss_intent(logits, y=2, smoothing=0.1)

    reports.append(grad_check(f_intent, Tensor(rng.standard_normal(6)), h=H, tol=tol,
                              name="loss_intent"))
    return reports


def full_suite(seed: int = 0, tol: float = TOL) -> list[GradCheckReport]:
    return primitive_checks(seed, tol) + encoder_check(seed, tol) + loss_checks(seed, tol)
