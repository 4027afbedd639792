"""Synthetic grounding episodes with a planted, learnable target.

A fixed "world" (word table, class and action prototypes) is drawn from
``world_seed``. Each episode draws K object tracks around class prototypes;
inside the ground-truth window the queried object's features carry
``strength`` times the queried action's prototype, and the activity stream
carries that same signature. Episode i depends only on (seed, i), so a
held-out split is just a different index range of the same generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import EpisodeManifest, write_episode
from .records import read_tensor, write_tensor


@dataclass
class SynthConfig:
    seed: int = 0
    episodes: int = 64
    first_index: int = 0
    M: int = 32
    K: int = 6
    D_o: int = 32
    D_w: int = 32
    vocab: int = 40
    n_classes: int = 8
    n_actions: int = 4
    noise: float = 1.0
    strength: float = 5.0
    seg_min: float = 0.15
    seg_max: float = 0.5
    distractors: int = 2
    class_scale: float = 3.0
    world_seed: int = 0
    prefix: str = "ep"

    def __post_init__(self):
        if not 0 < self.seg_min <= self.seg_max <= 1:
            raise ValueError("segment fraction range must satisfy 0 < min <= max <= 1")
        if self.vocab < self.n_classes + self.n_actions + self.distractors:
            raise ValueError("vocab too small for classes, actions and distractors")
        if self.M < 2 or self.K < 1 or self.episodes < 0:
            raise ValueError("need M >= 2, K >= 1, episodes >= 0")


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_world(cfg: SynthConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.world_seed, 7919])
    return {
        "words": _unit(rng, cfg.vocab, cfg.D_w),
        "classes": cfg.class_scale * _unit(rng, cfg.n_classes, cfg.D_o),
        "actions": _unit(rng, cfg.n_actions, cfg.D_o),
    }


def _boxes(rng: np.random.Generator, M: int, K: int) -> np.ndarray:
    half = rng.uniform(0.05, 0.15, size=(K, 2))
    centre = rng.uniform(0.2, 0.8, size=(K, 2))
    out = np.empty((M, K, 4))
    for t in range(M):
        centre = np.clip(centre + rng.normal(0, 0.02, size=(K, 2)), half, 1 - half)
        out[t, :, :2] = centre - half
        out[t, :, 2:] = centre + half
    return np.clip(out, 0.0, 1.0)


def make_episode(cfg: SynthConfig, world: dict[str, np.ndarray], index: int) -> dict:
    rng = np.random.default_rng([cfg.seed, index])
    M, K = cfg.M, cfg.K
    target = int(rng.integers(cfg.n_classes))
    action = int(rng.integers(cfg.n_actions))
    others = rng.integers(cfg.n_classes - 1, size=K - 1)
    others = others + (others >= target)  # every other track is a different class
    slot = int(rng.integers(K))
    classes = np.insert(others, slot, target)

    objects = world["classes"][classes][None] + cfg.noise * rng.standard_normal((M, K, cfg.D_o))
    length = int(rng.integers(math.ceil(cfg.seg_min * M), math.floor(cfg.seg_max * M) + 1))
    length = max(1, length)
    start = int(rng.integers(0, M - length + 1))
    signature = cfg.strength * world["actions"][action]
    objects[start:start + length, slot] += signature
    activity = cfg.noise * rng.standard_normal((M, cfg.D_o))
    # the mean over active objects' signatures; exactly one object is active here
    activity[start:start + length] += signature

    filler = np.arange(cfg.n_classes + cfg.n_actions, cfg.vocab)
    extra = rng.choice(filler, size=cfg.distractors, replace=False)
    tokens = np.concatenate([[target, cfg.n_classes + action], extra]).astype(int)
    tokens = tokens[rng.permutation(len(tokens))]
    words = world["words"][tokens]
    glob = world["words"][target] + world["words"][cfg.n_classes + action]
    glob = glob / np.linalg.norm(glob)

    return {
        "episode_id": f"{cfg.prefix}{index:05d}",
        "objects": objects, "boxes": _boxes(rng, M, K), "activity": activity,
        "words": words, "global": glob,
        "t_start": float(start), "t_end": float(start + length), "duration": float(M),
        "extra": {"query_tokens": tokens.tolist(), "target_class": target, "action": action,
                  "target_slot": slot},
    }


def generate_synthetic(cfg: SynthConfig, root: str | Path) -> list[EpisodeManifest]:
    """Write ``cfg.episodes`` episodes (1 frame = 1 second) plus the world tables."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    world = make_world(cfg)
    (root / "prototypes").mkdir(exist_ok=True)
    for name, arr in world.items():
        write_tensor(root / "prototypes" / f"{name}.tsrf", arr)
    (root / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=1) + "\n")
    manifests = []
    for i in range(cfg.first_index, cfg.first_index + cfg.episodes):
        e = make_episode(cfg, world, i)
        manifests.append(write_episode(
            root, e["episode_id"], e["objects"], e["boxes"], e["activity"], e["words"],
            e["global"], e["t_start"], e["t_end"], e["duration"], **e["extra"]))
    return manifests


def _longest_run(flags: np.ndarray) -> tuple[int, int] | None:
    best, cur_start, best_len = None, None, 0
    for t, f in enumerate(list(flags) + [False]):
        if f and cur_start is None:
            cur_start = t
        elif not f and cur_start is not None:
            if t - cur_start > best_len:
                best, best_len = (cur_start, t), t - cur_start
            cur_start = None
    return best


def prototype_oracle(root: str | Path, strength: float | None = None) -> list[float]:
    """Nearest-prototype detector that ignores the model entirely.

    Projects each activity frame onto the queried action's prototype,
    thresholds at half the signature strength and takes the longest run of
    hits as the predicted window. Returns the per-episode tIoU.
    """
    root = Path(root)
    meta = json.loads((root / "synth_config.json").read_text())
    strength = meta["strength"] if strength is None else strength
    actions = read_tensor(root / "prototypes" / "actions.tsrf")
    tious = []
    for mp in sorted((root / "episodes").glob("*/manifest.json")):
        m = EpisodeManifest.read(mp)
        act = read_tensor(m.path("activity"))
        proj = act @ actions[m.extra["action"]]
        run = _longest_run(proj > strength / 2) if strength > 0 else None
        s, e = run if run is not None else (0, len(proj))
        inter = max(0.0, min(e, m.t_end) - max(s, m.t_start))
        union = max(e, m.t_end) - min(s, m.t_start)
        tious.append(inter / union)
    return tious
