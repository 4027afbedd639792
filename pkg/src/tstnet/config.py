"""Model/training configuration and named presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

ABLATIONS = ("no_ssr", "no_tg_filters_shared", "no_filter", "no_dtu", "no_gru", "no_reverse")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # architecture
    D: int = 512
    K: int = 15
    k: int = 5
    M: int = 64
    N_max: int = 25
    D_o: int = 1024
    D_in: int = 1024
    D_w: int = 300
    D_g: int = 4800
    leaky_slope: float = 0.01
    # localizer
    budget: int = 384
    tau_lo: float = 0.3
    tau_hi: float = 0.7
    pos_thresh: float = 0.5
    reg_weight: float = 1.0
    no_refine: bool = False
    top_n: int = 5
    # optimisation
    lr: float = 0.0008
    epochs: int = 60
    batch: int = 64
    clip_norm: float = 10.0
    seed: int = 0
    deterministic: bool = True
    val_fraction: float = 0.2
    # ablations (one per row of the ablation table)
    no_ssr: bool = False
    no_tg_filters_shared: bool = False
    no_filter: bool = False
    no_dtu: bool = False
    no_gru: bool = False
    no_reverse: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("D", "K", "k", "M", "N_max", "D_o", "D_in", "D_w", "D_g",
                     "budget", "epochs", "batch", "top_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k > self.K:
            raise ConfigError(f"k={self.k} object filters exceed K={self.K} objects")
        if self.M < 2:
            raise ConfigError("M must be at least 2")
        if not 0 <= self.tau_lo < self.tau_hi <= 1:
            raise ConfigError("need 0 <= tau_lo < tau_hi <= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and clip_norm must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @property
    def ablations(self) -> dict[str, bool]:
        return {a: getattr(self, a) for a in ABLATIONS}

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Config":
        d = dict(d)
        preset = d.pop("preset", None)
        # ablation flags may also arrive grouped
        for flag, on in d.pop("ablations", {}).items():
            d[flag] = on
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = PRESETS[preset].to_dict() if preset else {}
        base.update(d)
        return cls(**base)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def coerce(cfg: Config, key: str, raw: str) -> Config:
    """Apply a ``key=value`` override from the command line."""
    fields = {f.name: f for f in dataclasses.fields(Config)}
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(cfg, key)
    if isinstance(current, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"{key} expects a boolean, got {raw!r}")
        value: Any = raw.lower() in ("1", "true", "yes")
    else:
        try:
            value = int(raw) if isinstance(current, int) else float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    return cfg.replace(**{key: value})


PRESETS: dict[str, Config] = {
    "charades": Config(M=64, budget=384),
    "tacos": Config(M=200, budget=800),
    # small dims used by gradient checks
    "tiny": Config(D=8, K=4, k=2, M=6, N_max=5, D_o=6, D_in=7, D_w=5, D_g=9,
                   budget=16, batch=2, epochs=1),
    # desk-scale synthetic benchmark
    "synthetic": Config(D=64, K=6, k=3, M=32, N_max=8, D_o=32, D_in=32, D_w=32,
                        D_g=32, budget=64, batch=64, epochs=300),
}
