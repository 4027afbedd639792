"""Proposal-based moment localization over the fused track features.

A fixed multi-scale grid of frame windows is mean-pooled from the track
features, scored by a sigmoid head and nudged by a boundary regression head.
Frame windows are inclusive: proposal (s, e) covers frames s..e, i.e. the
continuous interval [s, e + 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nnmath import Affine, leaky_relu


@dataclass(frozen=True)
class MomentPrediction:
    t_start: float
    t_end: float
    score: float

    def to_dict(self) -> dict:
        return {"t_start": self.t_start, "t_end": self.t_end, "score": self.score}


def _grid(M: int, widths, strides) -> list[tuple[int, int]]:
    out = []
    for w, st in zip(widths, strides):
        out.extend((s, s + w - 1) for s in range(0, M - w + 1, st))
    return out


def _fit(props: list[tuple[int, int]], budget: int) -> np.ndarray:
    arr = np.asarray(props, dtype=np.int64).reshape(-1, 2)
    n = len(arr)
    if n > budget:
        arr = arr[(np.arange(budget) * n) // budget]
    elif n < budget:
        arr = np.concatenate([arr, np.repeat(arr[-1:], budget - n, axis=0)])
    return arr


def enumerate_proposals(M: int, budget: int) -> np.ndarray:
    """Deterministic ``[budget, 2]`` array of inclusive (start, end) frame windows.

    Widths ceil(M/8), ceil(M/4), ceil(M/2), M with stride max(1, width // 8),
    listed in (width, start) order. An oversized grid is thinned to an evenly
    spaced subsequence; an undersized one is retried once at half stride and
    then padded with its last window. Below 8 frames every segment is listed.
    """
    if budget < 1:
        raise ValueError("proposal budget must be >= 1")
    if M < 1:
        raise ValueError("need at least one frame")
    if M < 8:
        props = [(s, s + w - 1) for w in range(1, M + 1) for s in range(M - w + 1)]
        return _fit(props[:budget], budget)
    widths = sorted({math.ceil(M / 8), math.ceil(M / 4), math.ceil(M / 2), M})
    strides = [max(1, w // 8) for w in widths]
    props = _grid(M, widths, strides)
    if len(props) < budget:
        props = _grid(M, widths, [max(1, s // 2) for s in strides])
    return _fit(props, budget)


def segment_tiou(a_start, a_end, b_start, b_end):
    """Elementwise temporal IoU of [a_start, a_end) and [b_start, b_end)."""
    inter = np.clip(np.minimum(a_end, b_end) - np.maximum(a_start, b_start), 0, None)
    union = np.maximum(a_end, b_end) - np.minimum(a_start, b_start)
    return inter / union


def proposal_tiou(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """tIoU of every proposal against each gt; gt is ``[B, 2]`` continuous frames."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    ps = proposals[:, 0][None].astype(np.float64)
    pe = proposals[:, 1][None].astype(np.float64) + 1
    return segment_tiou(ps, pe, gt[:, :1], gt[:, 1:])


def pooling_matrix(proposals: np.ndarray, M: int) -> torch.Tensor:
    P = len(proposals)
    A = np.zeros((P, M), dtype=np.float64)
    for i, (s, e) in enumerate(proposals):
        A[i, s:e + 1] = 1.0 / (e - s + 1)
    return torch.from_numpy(A)


def frames_to_seconds(start, end, M: int, duration: float):
    """Inclusive frame window -> (t_start, t_end) in seconds."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    return start * duration / M, (end + 1) * duration / M


def seconds_to_frames(t_start, t_end, M: int, duration: float):
    """Seconds -> continuous frame interval [s, e) (exclusive end)."""
    return t_start * M / duration, t_end * M / duration


def refine(proposals: torch.Tensor, offsets: torch.Tensor, M: int) -> torch.Tensor:
    """Shift boundaries by the offsets, clamp to the frame range and fall back
    to the raw window wherever the shifted start passes the shifted end."""
    raw = proposals.to(offsets.dtype)
    moved = (raw + offsets).clamp(0, M - 1)
    bad = (moved[..., 0] > moved[..., 1]).unsqueeze(-1)
    return torch.where(bad, raw.expand_as(moved), moved)


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def localization_loss(logits: torch.Tensor, shifted: torch.Tensor, proposals: np.ndarray,
                      gt_frames, tau_lo: float = 0.3, tau_hi: float = 0.7,
                      pos_thresh: float = 0.5, reg_weight: float = 1.0) -> torch.Tensor:
    """BCE on scaled-IoU labels plus smooth-L1 boundary regression on positives.

    ``logits``: [B, P] pre-sigmoid scores; ``shifted``: [B, P, 2] proposal
    boundaries plus regression offsets (inclusive frame indices);
    ``gt_frames``: [B, 2] continuous [start, end) frame interval. Returns the
    mean over episodes.
    """
    tiou = proposal_tiou(proposals, np.asarray(gt_frames))
    y = np.clip((tiou - tau_lo) / (tau_hi - tau_lo), 0.0, 1.0)
    y_t = torch.as_tensor(y, dtype=logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, y_t, reduction="none").mean(dim=-1)

    gt = torch.as_tensor(np.asarray(gt_frames, dtype=np.float64).reshape(-1, 2), dtype=shifted.dtype)
    target = torch.stack([gt[:, 0], gt[:, 1] - 1], dim=-1).unsqueeze(-2)  # inclusive end
    per = smooth_l1(shifted - target).sum(dim=-1)  # [B, P]
    pos = torch.as_tensor(tiou > pos_thresh)
    n_pos = pos.sum(dim=-1)
    reg = torch.where(n_pos > 0, (per * pos).sum(dim=-1) / n_pos.clamp_min(1), torch.zeros_like(bce))
    return (bce + reg_weight * reg).mean()


class MomentLocalizer(nn.Module):
    def __init__(self, cfg, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        D = cfg.D
        self.score_hidden = Affine(2 * D, D, generator)
        self.score_out = Affine(D, 1, generator)
        self.reg_hidden = Affine(2 * D, D, generator)
        self.reg_out = Affine(D, 2, generator)
        self.proposals = enumerate_proposals(cfg.M, cfg.budget)
        self.register_buffer("pool", pooling_matrix(self.proposals, cfg.M).float(), persistent=False)
        self.register_buffer("prop_t", torch.from_numpy(self.proposals), persistent=False)

    def score_proposals(self, F_tilde: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits [..., P], offsets [..., P, 2])."""
        feats = self.pool.to(F_tilde.dtype) @ F_tilde
        slope = self.cfg.leaky_slope
        logits = self.score_out(leaky_relu(self.score_hidden(feats), slope)).squeeze(-1)
        offsets = self.reg_out(leaky_relu(self.reg_hidden(feats), slope))
        return logits, offsets

    def loss(self, F_tilde: torch.Tensor, gt_frames) -> torch.Tensor:
        cfg = self.cfg
        logits, offsets = self.score_proposals(F_tilde)
        shifted = self.prop_t.to(offsets.dtype) + offsets
        return localization_loss(logits, shifted, self.proposals, gt_frames,
                                 cfg.tau_lo, cfg.tau_hi, cfg.pos_thresh, cfg.reg_weight)

    @torch.no_grad()
    def predict(self, F_tilde: torch.Tensor, durations, top_n: int | None = None
                ) -> list[list[MomentPrediction]]:
        logits, offsets = self.score_proposals(F_tilde)
        return rank_predictions(torch.sigmoid(logits), offsets, self.prop_t, self.cfg.M,
                                durations, top_n or self.cfg.top_n, self.cfg.no_refine)


def rank_predictions(scores: torch.Tensor, offsets: torch.Tensor, proposals: torch.Tensor, M: int,
                     durations, top_n: int, no_refine: bool = False) -> list[list[MomentPrediction]]:
    """Sort by descending score; ties go to the earlier start, then the shorter window."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if scores.dim() == 1:
        scores, offsets = scores[None], offsets[None]
    bounds = proposals.to(torch.float64).expand(scores.shape[0], -1, -1)
    if not no_refine:
        bounds = refine(proposals, offsets.to(torch.float64), M)
    durations = np.broadcast_to(np.asarray(durations, dtype=np.float64), (scores.shape[0],))
    out = []
    for b in range(scores.shape[0]):
        s = scores[b].double().numpy()
        ts, te = frames_to_seconds(bounds[b, :, 0].numpy(), bounds[b, :, 1].numpy(), M, durations[b])
        order = np.lexsort((te - ts, ts, -s))[:top_n]
        out.append([MomentPrediction(float(ts[i]), float(te[i]), float(s[i])) for i in order])
    return out
