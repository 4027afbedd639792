"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {"step": self.step, "m": {k: t.clone() for k, t in self.m.items()},
                "v": {k: t.clone() for k, t in self.v.items()}}

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamState":
        return cls(d["step"], {k: t.clone() for k, t in d["m"].items()},
                   {k: t.clone() for k, t in d["v"].items()})


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place. A non-finite gradient aborts before anything changes."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}; step skipped")
    t = state.step + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    state.step = t
    return state


@torch.no_grad()
def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())).item()
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
        log.info("gradient clipped: norm %.4g -> %.4g", total, max_norm)
    return total
