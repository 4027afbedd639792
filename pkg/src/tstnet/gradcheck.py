"""Module-by-module gradient checks at small dimensions (float64)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .config import PRESETS, Config
from .encoder import EncodedEpisode
from .generator import TargetBundle
from .model import Batch, TSTNet
from .nnmath import (GRUCell, GradCheckResult, affine, grad_check, grad_check_functional, gru_step,
                     leaky_relu, maxpool_axis, sigmoid, tanh)
from .tracker import track

DTYPE = torch.float64


@dataclass
class Fragment:
    name: str
    tol: float
    run: Callable[[int, int | None], GradCheckResult]


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def _proj_loss(out: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    return (out * R).sum()


def random_batch(cfg: Config, B: int, g: torch.Generator, N: int | None = None) -> Batch:
    """Random inputs shaped for ``cfg``; the last word of episode 0 is padding."""
    N = N or cfg.N_max
    mask = torch.ones(B, N, dtype=torch.bool)
    if N > 1:
        mask[0, -1] = False
    boxes = torch.rand(B, cfg.M, cfg.K, 2, generator=g, dtype=DTYPE) * 0.5
    boxes = torch.cat([boxes, boxes + 0.4], dim=-1)
    gt = np.array([[1.0, 4.0], [0.5, 6.0]] * ((B + 1) // 2))[:B] * cfg.M / 6
    return Batch(_randn(g, B, cfg.M, cfg.K, cfg.D_o), boxes, _randn(g, B, cfg.M, cfg.D_in),
                 _randn(g, B, N, cfg.D_w), mask, _randn(g, B, cfg.D_g), gt,
                 np.full(B, float(cfg.M)), [f"g{i}" for i in range(B)])


def _model(cfg: Config, seed: int) -> TSTNet:
    m = TSTNet(cfg, seed=seed).to(DTYPE)
    # nonzero biases so their gradients are exercised at a generic point
    g = _gen(seed + 1)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.split(".")[-1].startswith("b"):
                p.copy_(0.1 * _randn(g, *p.shape))
    return m


def check_affine_sigmoid(seed: int, max_entries: int | None) -> GradCheckResult:
    g = _gen(seed)
    x, W, b, R = _randn(g, 3, 4), _randn(g, 4, 5), _randn(g, 5), _randn(g, 3, 5)
    return grad_check(lambda _: _proj_loss(sigmoid(affine(x, W, b)), R),
                      {"x": x, "W": W, "b": b}, seed=seed, name="affine+sigmoid")


def check_activations(seed: int, max_entries: int | None) -> GradCheckResult:
    g = _gen(seed)
    x, R = _randn(g, 6, 3), _randn(g, 6, 3)
    return grad_check(lambda _: _proj_loss(tanh(leaky_relu(x, 0.01)) + sigmoid(x), R),
                      {"x": x}, seed=seed, name="activations")


def check_gru(seed: int, max_entries: int | None) -> GradCheckResult:
    g = _gen(seed)
    cell = GRUCell(4, 5, g).to(DTYPE)
    with torch.no_grad():
        for n in ("b_z", "b_r", "b_h"):
            getattr(cell, n).copy_(0.1 * _randn(g, 5))
    x, h, R = _randn(g, 4), 0.5 * _randn(g, 5), _randn(g, 5)
    tensors = {"x": x, "h_prev": h, **dict(cell.named_parameters())}
    return grad_check(lambda _: _proj_loss(gru_step(cell, x, h), R), tensors, seed=seed, name="gru_step")


def check_maxpool(seed: int, max_entries: int | None) -> GradCheckResult:
    g = _gen(seed)
    x, R = _randn(g, 3, 5, 4), _randn(g, 3, 4)
    return grad_check(lambda _: _proj_loss(maxpool_axis(x, 1), R), {"x": x}, seed=seed, name="maxpool")


class _Bound(nn.Module):
    """Adapter so ``functional_call`` can run any method of ``mod``."""

    def __init__(self, mod: nn.Module, fn: Callable):
        super().__init__()
        self.mod, self.fn = mod, fn

    def forward(self, *args):
        return self.fn(self.mod, *args)


def _with_params(mod: nn.Module, fn: Callable, prefix: str):
    """Return ``call(values, *args)`` running ``fn(mod, *args)`` with the
    parameters taken from ``values[prefix + name]``."""
    bound = _Bound(mod, fn)
    names = [n for n, _ in mod.named_parameters()]

    def call(values, *args):
        params = {f"mod.{n}": values[prefix + n] for n in names}
        return functional_call(bound, params, args)

    return call


def _params(mod: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in mod.named_parameters()}


def check_encoder(seed: int, max_entries: int | None) -> GradCheckResult:
    cfg = PRESETS["tiny"]
    m, b = _model(cfg, seed), random_batch(cfg, 2, _gen(seed))
    g = _gen(seed + 2)
    run = _with_params(m.encoder, lambda enc: enc(b.objects, b.boxes, b.activity, b.words,
                                                  b.global_, b.word_mask), "")
    with torch.no_grad():
        probe = m.encode(b)
    Rs = [_randn(g, *o.shape) for o in (probe.V_o, probe.V_a, probe.Q_l, probe.Q_g)]

    def loss(v):
        enc = run(v)
        return sum(_proj_loss(o, r) for o, r in zip((enc.V_o, enc.V_a, enc.Q_l, enc.Q_g), Rs))

    return grad_check_functional(loss, _params(m.encoder, ""), seed=seed,
                                 max_entries=max_entries, name="encoder")


def _random_encoded(cfg: Config, g: torch.Generator, B: int = 2) -> EncodedEpisode:
    mask = torch.ones(B, cfg.N_max, dtype=torch.bool)
    mask[0, -1] = False
    Q_l = _randn(g, B, cfg.N_max, cfg.D) * mask.unsqueeze(-1)
    return EncodedEpisode(_randn(g, B, cfg.M, cfg.K, cfg.D), _randn(g, B, cfg.M, cfg.D),
                          Q_l, _randn(g, B, cfg.D), mask)


def _bundle_loss(bundle: TargetBundle, Rs: list[torch.Tensor]) -> torch.Tensor:
    outs = (bundle.S_o, bundle.S_a, bundle.S_s, bundle.T_o_obj, bundle.T_o_act, bundle.T_o_sem)
    return sum(_proj_loss(o, r) for o, r in zip(outs, Rs))


def check_generator(seed: int, max_entries: int | None) -> GradCheckResult:
    cfg = PRESETS["tiny"]
    m = _model(cfg, seed)
    g = _gen(seed)
    enc = _random_encoded(cfg, g)
    with torch.no_grad():
        probe = m.generator(enc)
    Rs = [_randn(g, *t.shape) for t in (probe.S_o, probe.S_a, probe.S_s,
                                        probe.T_o_obj, probe.T_o_act, probe.T_o_sem)]
    run = _with_params(m.generator, lambda gen, e: gen(e), "generator.")

    def loss(v):
        e = EncodedEpisode(v["V_o"], v["V_a"], enc.Q_l, v["Q_g"], enc.word_mask)
        return _bundle_loss(run(v, e), Rs)

    tensors = {"V_o": enc.V_o, "V_a": enc.V_a, "Q_g": enc.Q_g, **_params(m.generator, "generator.")}
    return grad_check_functional(loss, tensors, seed=seed, max_entries=max_entries, name="generator")


def check_tracker(seed: int, max_entries: int | None) -> GradCheckResult:
    cfg = PRESETS["tiny"]
    m = _model(cfg, seed)
    g = _gen(seed)
    M, D = cfg.M, cfg.D
    bundle = TargetBundle(_randn(g, 2, cfg.k, M, D), _randn(g, 2, M, D), _randn(g, 2, M, D),
                          _randn(g, 2, cfg.k, D), _randn(g, 2, D), _randn(g, 2, D))
    R = _randn(g, 2, M, 2 * D)
    run = _with_params(m.tracker, lambda tr, b: tr(b).F_tilde, "tracker.")

    def loss(v):
        b = TargetBundle(bundle.S_o, v["S_a"], bundle.S_s, v["T_o_obj"], bundle.T_o_act,
                         bundle.T_o_sem)
        return _proj_loss(run(v, b), R)

    tensors = {"T_o_obj": bundle.T_o_obj, "S_a": bundle.S_a, **_params(m.tracker, "tracker.")}
    return grad_check_functional(loss, tensors, seed=seed, max_entries=max_entries, name="tracker")


def check_recurrence_depth(seed: int, max_entries: int | None) -> GradCheckResult:
    """Gradient of a loss on the last template w.r.t. the original template, M = 8."""
    cfg = PRESETS["tiny"].replace(M=8)
    m = _model(cfg, seed)
    g = _gen(seed)
    upd = m.tracker.updaters.select(slice(0, 1))
    T_o, S, R = _randn(g, 1, cfg.D), _randn(g, 1, 8, cfg.D), _randn(g, cfg.D)
    return grad_check(lambda _: _proj_loss(track(T_o, S, upd)[0, -1], R), {"T_o": T_o},
                      seed=seed, name="recurrence(M=8)")


def check_localizer(seed: int, max_entries: int | None) -> GradCheckResult:
    cfg = PRESETS["tiny"]
    m = _model(cfg, seed)
    g = _gen(seed)
    F = _randn(g, 2, cfg.M, 2 * cfg.D)
    gt = np.array([[1.0, 4.0], [0.5, 6.0]])
    run = _with_params(m.localizer, lambda loc, x: loc.loss(x, gt), "localizer.")
    tensors = {"F_tilde": F, **_params(m.localizer, "localizer.")}
    return grad_check_functional(lambda v: run(v, v["F_tilde"]), tensors, seed=seed,
                                 max_entries=max_entries, name="localizer")


def check_pipeline(seed: int, max_entries: int | None, cfg: Config | None = None) -> GradCheckResult:
    """Every parameter of the whole network against the training loss."""
    cfg = cfg or PRESETS["tiny"]
    m = _model(cfg, seed)
    b = random_batch(cfg, 2, _gen(seed))

    def raw_loss(model, batch):
        # model.loss minus its finiteness guard, which cannot run under vmap
        _, _, tracks = model.features(batch)
        return model.localizer.loss(tracks.F_tilde, batch.gt_frames)

    run = _with_params(m, raw_loss, "")
    return grad_check_functional(lambda v: run(v, b), _params(m, ""), seed=seed,
                                 max_entries=max_entries, name="pipeline")


FRAGMENTS = [
    Fragment("affine+sigmoid", 1e-6, check_affine_sigmoid),
    Fragment("activations", 1e-6, check_activations),
    Fragment("gru_step", 1e-4, check_gru),
    Fragment("maxpool", 1e-4, check_maxpool),
    Fragment("encoder", 1e-4, check_encoder),
    Fragment("generator", 1e-4, check_generator),
    Fragment("tracker", 1e-4, check_tracker),
    Fragment("recurrence(M=8)", 1e-4, check_recurrence_depth),
    Fragment("localizer", 1e-4, check_localizer),
    Fragment("pipeline", 1e-4, check_pipeline),
]


def run_gradchecks(seed: int = 0, max_entries: int | None = 24) -> list[tuple[Fragment, GradCheckResult, float]]:
    """Run every fragment; returns (fragment, result, seconds) triples."""
    out = []
    for frag in FRAGMENTS:
        t0 = time.perf_counter()
        res = frag.run(seed, max_entries)
        out.append((frag, res, time.perf_counter() - t0))
    return out
