"""Feature intake: object/box fusion, activity resampling and query projection.

Pretrained extractors are not run here; their outputs arrive as tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nnmath import Affine, DimensionError, affine

log = logging.getLogger(__name__)


class FeatureValidationError(ValueError):
    pass


@dataclass
class EncodedEpisode:
    V_o: torch.Tensor  # [..., M, K, D]
    V_a: torch.Tensor  # [..., M, D]
    Q_l: torch.Tensor  # [..., N, D]
    Q_g: torch.Tensor  # [..., D]
    word_mask: torch.Tensor | None = None  # [..., N] bool


def validate_boxes(boxes) -> None:
    b = np.asarray(boxes)
    if b.shape[-1] != 4:
        raise FeatureValidationError(f"boxes need 4 coordinates, got shape {b.shape}")
    if (b < 0).any() or (b > 1).any():
        raise FeatureValidationError("box coordinates must lie in [0, 1]")
    if (b[..., 0] > b[..., 2]).any() or (b[..., 1] > b[..., 3]).any():
        raise FeatureValidationError("boxes must satisfy x1 <= x2 and y1 <= y2")


def fuse_object_spatial(objects: torch.Tensor, boxes: torch.Tensor,
                        W: torch.Tensor, b: torch.Tensor | None = None,
                        validate: bool = True) -> torch.Tensor:
    """concat(object feature, box) -> affine to width D, per object."""
    if objects.shape[:-1] != boxes.shape[:-1]:
        raise DimensionError(
            f"objects {tuple(objects.shape)} and boxes {tuple(boxes.shape)} disagree"
        )
    if validate:
        validate_boxes(boxes.detach().cpu().numpy())
    return affine(torch.cat([objects, boxes], dim=-1), W, b)


def resample_activity(features: np.ndarray, M: int) -> np.ndarray:
    """Linearly interpolate ``[M_raw, D_in]`` clip features onto M frames.

    Output row i sits at source position i*(M_raw-1)/(M-1); endpoints are
    copied exactly.
    """
    features = np.asarray(features)
    m_raw = features.shape[0]
    if m_raw == 0:
        raise FeatureValidationError("activity features are empty")
    if M < 2:
        raise FeatureValidationError("resampling needs M >= 2")
    if m_raw == M:
        return features.copy()
    if m_raw == 1:
        return np.repeat(features, M, axis=0)
    pos = np.arange(M, dtype=np.float64) * (m_raw - 1) / (M - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), m_raw - 2)
    frac = (pos - lo)[:, None]
    out = (1 - frac) * features[lo].astype(np.float64) + frac * features[lo + 1].astype(np.float64)
    out[0], out[-1] = features[0], features[-1]
    return out.astype(features.dtype)


def project_query(words: torch.Tensor, global_: torch.Tensor,
                  W_w: torch.Tensor, b_w: torch.Tensor | None,
                  W_g: torch.Tensor, b_g: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    return affine(words, W_w, b_w), affine(global_, W_g, b_g)


def truncate_words(words: np.ndarray, n_max: int, episode_id: str = "") -> np.ndarray:
    if words.shape[0] > n_max:
        log.warning("query of %s has %d words; truncated to %d", episode_id or "episode",
                    words.shape[0], n_max)
        return words[:n_max]
    return words


class Encoder(nn.Module):
    """Learned part of feature intake (fusion and width alignment)."""

    def __init__(self, cfg, generator: torch.Generator, identity_query: bool = False):
        super().__init__()
        D = cfg.D
        self.spatial = Affine(cfg.D_o + 4, D, generator)
        self.activity = Affine(cfg.D_in, D, generator) if cfg.D_in != D else None
        self.words = Affine(cfg.D_w, D, generator)
        self.glob = Affine(cfg.D_g, D, generator)
        if identity_query:
            with torch.no_grad():
                for proj, width in ((self.words, cfg.D_w), (self.glob, cfg.D_g)):
                    if width != D:
                        raise DimensionError("identity query projection needs input width == D")
                    proj.W.copy_(torch.eye(D))

    def forward(self, objects, boxes, activity, words, global_, word_mask=None) -> EncodedEpisode:
        V_o = fuse_object_spatial(objects, boxes, self.spatial.W, self.spatial.b, validate=False)
        V_a = self.activity(activity) if self.activity is not None else activity
        Q_l, Q_g = project_query(words, global_, self.words.W, self.words.b, self.glob.W, self.glob.b)
        if word_mask is not None:
            Q_l = Q_l * word_mask.unsqueeze(-1).to(Q_l.dtype)
        return EncodedEpisode(V_o, V_a, Q_l, Q_g, word_mask)
