"""Episode manifests, dataset directory layout and batching.

Layout::

    <root>/episodes/<episode_id>/manifest.json
    <root>/episodes/<episode_id>/{objects,boxes,activity,words,global}.tsrf
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from ..encoder import FeatureValidationError, resample_activity, truncate_words, validate_boxes
from ..model import Batch
from .records import read_tensor, write_tensor

log = logging.getLogger(__name__)

FILE_KEYS = ("objects", "boxes", "activity", "words", "global")


class DatasetError(ValueError):
    pass


@dataclass
class EpisodeManifest:
    episode_id: str
    duration_seconds: float
    files: dict[str, str]
    t_start: float
    t_end: float
    extra: dict = field(default_factory=dict)
    root: Path | None = None

    def validate(self) -> None:
        if self.duration_seconds <= 0:
            raise DatasetError(f"{self.episode_id}: duration must be positive")
        if not 0 <= self.t_start < self.t_end <= self.duration_seconds:
            raise DatasetError(
                f"{self.episode_id}: need 0 <= t_start < t_end <= duration, got "
                f"({self.t_start}, {self.t_end}) with duration {self.duration_seconds}"
            )
        missing = [k for k in FILE_KEYS if k not in self.files]
        if missing:
            raise DatasetError(f"{self.episode_id}: manifest lacks files {missing}")

    def path(self, key: str) -> Path:
        p = Path(self.files[key])
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_json(self) -> dict:
        d = {
            "episode_id": self.episode_id,
            "duration_seconds": self.duration_seconds,
            "files": dict(self.files),
            "gt": {"t_start": self.t_start, "t_end": self.t_end},
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_json(cls, d: dict, root: Path | None = None) -> "EpisodeManifest":
        try:
            extra = {k: v for k, v in d.items()
                     if k not in ("episode_id", "duration_seconds", "files", "gt")}
            m = cls(str(d["episode_id"]), float(d["duration_seconds"]), dict(d["files"]),
                    float(d["gt"]["t_start"]), float(d["gt"]["t_end"]), extra, root)
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed manifest: missing {e}") from None
        m.validate()
        return m

    @classmethod
    def read(cls, path: str | Path) -> "EpisodeManifest":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), root=path.parent)


def write_episode(root: str | Path, episode_id: str, objects, boxes, activity, words, global_,
                  t_start: float, t_end: float, duration: float, **extra) -> EpisodeManifest:
    """Store one episode's feature arrays and manifest under ``root``.

    This is also the entry point for real precomputed features: pass the
    region features/boxes sampled at M frames, clip features, word vectors
    and the sentence vector as arrays.
    """
    ep_dir = Path(root) / "episodes" / episode_id
    ep_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, arr in zip(FILE_KEYS, (objects, boxes, activity, words, global_)):
        files[key] = f"{key}.tsrf"
        write_tensor(ep_dir / files[key], arr)
    m = EpisodeManifest(episode_id, float(duration), files, float(t_start), float(t_end), extra, ep_dir)
    m.validate()
    (ep_dir / "manifest.json").write_text(json.dumps(m.to_json(), indent=1) + "\n")
    return m


@dataclass
class Episode:
    manifest: EpisodeManifest
    objects: np.ndarray
    boxes: np.ndarray
    activity: np.ndarray
    words: np.ndarray
    global_: np.ndarray

    @property
    def episode_id(self) -> str:
        return self.manifest.episode_id

    def gt_frames(self, M: int) -> tuple[float, float]:
        m = self.manifest
        return m.t_start * M / m.duration_seconds, m.t_end * M / m.duration_seconds


def _expect(ep: str, key: str, arr: np.ndarray, shape: tuple) -> None:
    if len(arr.shape) != len(shape) or any(s is not None and a != s for a, s in zip(arr.shape, shape)):
        want = tuple("*" if s is None else s for s in shape)
        raise DatasetError(f"{ep}: {key}.tsrf has shape {arr.shape}, expected {want}")


def load_episode(manifest: EpisodeManifest, cfg) -> Episode:
    ep = manifest.episode_id
    try:
        arrays = {k: read_tensor(manifest.path(k)) for k in FILE_KEYS}
    except FileNotFoundError as e:
        raise DatasetError(f"{ep}: missing file {e.filename}") from None
    _expect(ep, "objects", arrays["objects"], (cfg.M, cfg.K, cfg.D_o))
    _expect(ep, "boxes", arrays["boxes"], (cfg.M, cfg.K, 4))
    _expect(ep, "activity", arrays["activity"], (None, cfg.D_in))
    _expect(ep, "words", arrays["words"], (None, cfg.D_w))
    _expect(ep, "global", arrays["global"], (cfg.D_g,))
    try:
        validate_boxes(arrays["boxes"])
    except FeatureValidationError as e:
        raise DatasetError(f"{ep}: {e}") from None
    words = truncate_words(arrays["words"], cfg.N_max, ep)
    if len(words) == 0:
        raise DatasetError(f"{ep}: query has no words")
    zero = np.flatnonzero(np.linalg.norm(words, axis=-1) == 0)
    if len(zero):
        raise DatasetError(f"{ep}: word vector {int(zero[0])} has zero norm")
    activity = resample_activity(arrays["activity"], cfg.M)
    return Episode(manifest, arrays["objects"], arrays["boxes"], activity, words, arrays["global"])


def episode_split(episode_id: str, val_fraction: float) -> str:
    """Stable train/val assignment from a CRC32 of the id."""
    bucket = zlib.crc32(episode_id.encode()) % 1000
    return "val" if bucket < round(val_fraction * 1000) else "train"


class Dataset:
    def __init__(self, episodes: list[Episode], cfg):
        self.episodes = sorted(episodes, key=lambda e: e.episode_id)
        self.cfg = cfg

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def ids(self) -> list[str]:
        return [e.episode_id for e in self.episodes]

    def subset(self, ids) -> "Dataset":
        keep = set(ids)
        return Dataset([e for e in self.episodes if e.episode_id in keep], self.cfg)

    def split(self, val_fraction: float) -> tuple["Dataset", "Dataset"]:
        tr = [e for e in self.episodes if episode_split(e.episode_id, val_fraction) == "train"]
        va = [e for e in self.episodes if episode_split(e.episode_id, val_fraction) == "val"]
        return Dataset(tr, self.cfg), Dataset(va, self.cfg)

    def collate(self, idx) -> Batch:
        eps = [self.episodes[i] for i in idx]
        M = self.cfg.M
        N = max(len(e.words) for e in eps)
        words = np.zeros((len(eps), N, self.cfg.D_w), dtype=np.float32)
        mask = np.zeros((len(eps), N), dtype=bool)
        for i, e in enumerate(eps):
            words[i, :len(e.words)] = e.words
            mask[i, :len(e.words)] = True
        t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))  # noqa: E731
        return Batch(
            objects=t([e.objects for e in eps]),
            boxes=t([e.boxes for e in eps]),
            activity=t([e.activity for e in eps]),
            words=torch.from_numpy(words),
            word_mask=torch.from_numpy(mask),
            global_=t([e.global_ for e in eps]),
            gt_frames=np.array([e.gt_frames(M) for e in eps], dtype=np.float64),
            durations=np.array([e.manifest.duration_seconds for e in eps], dtype=np.float64),
            ids=[e.episode_id for e in eps],
        )

    def order(self, shuffle: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        if rng is None:
            raise ValueError("shuffling needs a seeded generator")
        return rng.permutation(len(self))

    def batches(self, batch: int, shuffle: bool = False,
                rng: np.random.Generator | None = None) -> Iterator[Batch]:
        order = self.order(shuffle, rng)
        for i in range(0, len(order), batch):
            yield self.collate(order[i:i + batch])


def load_dataset(root: str | Path, cfg) -> Dataset:
    root = Path(root)
    paths = sorted((root / "episodes").glob("*/manifest.json"))
    if not paths:
        raise DatasetError(f"no episodes under {root / 'episodes'}")
    episodes = [load_episode(EpisodeManifest.read(p), cfg) for p in paths]
    return Dataset(episodes, cfg)


def ground_truths(ds: Dataset) -> dict[str, tuple[float, float]]:
    return {e.episode_id: (e.manifest.t_start, e.manifest.t_end) for e in ds.episodes}
