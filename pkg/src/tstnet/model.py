"""Full network: encoder -> target generator -> tracker -> localizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import Config
from .encoder import EncodedEpisode, Encoder
from .generator import TargetBundle, TargetGenerator
from .localizer import MomentLocalizer, MomentPrediction
from .nnmath import check_finite
from .tracker import TemporalTracker, TrackTensor


@dataclass
class Batch:
    """Stacked model inputs for B episodes (words padded to a common N)."""

    objects: torch.Tensor    # [B, M, K, D_o]
    boxes: torch.Tensor      # [B, M, K, 4]
    activity: torch.Tensor   # [B, M, D_in]
    words: torch.Tensor      # [B, N, D_w]
    word_mask: torch.Tensor  # [B, N] bool
    global_: torch.Tensor    # [B, D_g]
    gt_frames: np.ndarray    # [B, 2] continuous [start, end)
    durations: np.ndarray    # [B]
    ids: list[str]

    def to(self, dtype: torch.dtype) -> "Batch":
        cast = lambda t: t.to(dtype)  # noqa: E731
        return Batch(cast(self.objects), cast(self.boxes), cast(self.activity), cast(self.words),
                     self.word_mask, cast(self.global_), self.gt_frames, self.durations, self.ids)

    def __len__(self) -> int:
        return len(self.ids)


class TSTNet(nn.Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
        self.encoder = Encoder(cfg, g)
        self.generator = TargetGenerator(cfg, g)
        self.tracker = TemporalTracker(cfg, g)
        self.localizer = MomentLocalizer(cfg, g)

    def set_config(self, cfg: Config) -> None:
        """Swap runtime flags (ablations, loss constants) without touching weights."""
        self.cfg = cfg
        for m in (self.generator, self.tracker, self.localizer):
            m.cfg = cfg

    def encode(self, batch: Batch) -> EncodedEpisode:
        return self.encoder(batch.objects, batch.boxes, batch.activity, batch.words,
                            batch.global_, batch.word_mask)

    def features(self, batch: Batch) -> tuple[EncodedEpisode, TargetBundle, TrackTensor]:
        enc = self.encode(batch)
        bundle = self.generator(enc)
        tracks = self.tracker(bundle)
        return enc, bundle, tracks

    def loss(self, batch: Batch) -> torch.Tensor:
        _, _, tracks = self.features(batch)
        return check_finite(self.localizer.loss(tracks.F_tilde, batch.gt_frames), "loss")

    @torch.no_grad()
    def predict(self, batch: Batch, top_n: int | None = None) -> list[list[MomentPrediction]]:
        _, _, tracks = self.features(batch)
        return self.localizer.predict(tracks.F_tilde, batch.durations, top_n)
