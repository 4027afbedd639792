"""Differentiable primitives shared by every stage of the network.

Gradients come from torch's reverse-mode autograd. Everything here works on
plain tensors so the same code runs in float32 (training) and float64
(gradient checking).

Weights may carry a leading "stream" axis: ``W`` of shape ``[P, In, Out]``
applied to ``x`` of shape ``[..., P, In]`` maps every stream with its own
matrix. This is how the tracker runs k+2 independent template updaters in a
single batched recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """y = xW (+ b), optionally per stream when W is ``[P, In, Out]``."""
    if W.dim() == 2:
        if x.shape[-1] != W.shape[0]:
            raise DimensionError(
                f"affine: input {tuple(x.shape)} incompatible with weight {tuple(W.shape)}"
            )
        y = x @ W
    elif W.dim() == 3:
        if x.dim() < 2 or x.shape[-2] != W.shape[0] or x.shape[-1] != W.shape[1]:
            raise DimensionError(
                f"affine: input {tuple(x.shape)} incompatible with stacked weight {tuple(W.shape)}"
            )
        y = torch.einsum("...pi,pio->...po", x, W)
    else:
        raise DimensionError(f"affine: weight must be 2-D or 3-D, got {tuple(W.shape)}")
    if b is not None:
        y = y + b
    return y


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return torch.where(x >= 0, x, slope * x)


def maxpool_axis(x: torch.Tensor, axis, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max over one axis, or jointly over a tuple of adjacent axes.

    Ties route the subgradient to the first maximal element in scan order.
    ``mask`` (broadcastable to ``x``, True = keep) excludes padded positions.
    """
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(sorted(a % x.dim() for a in axes))
    for a in axes:
        if x.shape[a] == 0:
            raise DimensionError(f"maxpool over empty axis {a} of {tuple(x.shape)}")
    if axes != tuple(range(axes[0], axes[0] + len(axes))):
        raise DimensionError(f"maxpool axes must be adjacent, got {axes}")
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    if len(axes) > 1:
        x = x.flatten(axes[0], axes[-1])
    return x.max(dim=axes[0]).values


def uniform_fan_in(shape: tuple[int, ...], fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound


def weight(shape: tuple[int, ...], generator: torch.Generator, fan_in: int | None = None) -> nn.Parameter:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in defaults to shape[-2]."""
    fan_in = shape[-2] if fan_in is None else fan_in
    return nn.Parameter(uniform_fan_in(shape, fan_in, generator).float())


def bias(shape: tuple[int, ...]) -> nn.Parameter:
    return nn.Parameter(torch.zeros(shape))


class Affine(nn.Module):
    """Weight + optional bias, stacked over ``streams`` when given."""

    def __init__(self, n_in: int, n_out: int, generator: torch.Generator,
                 streams: int | None = None, use_bias: bool = True):
        super().__init__()
        lead = () if streams is None else (streams,)
        self.W = weight(lead + (n_in, n_out), generator)
        self.b = bias(lead + (n_out,)) if use_bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine(x, self.W, self.b)


class GRUCell(nn.Module):
    """Gated recurrent unit with separate blocks for update, reset and candidate.

    The candidate applies the reset gate before the recurrent matrix,
    ``tanh(W_h x + b_h + U_h (r * h))``.
    """

    def __init__(self, n_in: int, width: int, generator: torch.Generator, streams: int | None = None):
        super().__init__()
        lead = () if streams is None else (streams,)
        self.width = width
        self.w_z = weight(lead + (n_in, width), generator)
        self.u_z = weight(lead + (width, width), generator)
        self.b_z = bias(lead + (width,))
        self.w_r = weight(lead + (n_in, width), generator)
        self.u_r = weight(lead + (width, width), generator)
        self.b_r = bias(lead + (width,))
        self.w_h = weight(lead + (n_in, width), generator)
        self.u_h = weight(lead + (width, width), generator)
        self.b_h = bias(lead + (width,))

    BLOCKS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def forward(self, x: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
        return gru_step(self, x, h_prev)

    def select(self, idx) -> SimpleNamespace:
        """View of a subset of stacked cells (``idx`` indexes the stream axis)."""
        return SimpleNamespace(width=self.width, **{n: getattr(self, n)[idx] for n in self.BLOCKS})


def gru_step(params: GRUCell, x: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
    if h_prev.shape[-1] != params.width:
        raise DimensionError(
            f"gru_step: hidden width {h_prev.shape[-1]} != cell width {params.width}"
        )
    z = sigmoid(affine(x, params.w_z, params.b_z) + affine(h_prev, params.u_z))
    r = sigmoid(affine(x, params.w_r, params.b_r) + affine(h_prev, params.u_r))
    h_tilde = tanh(affine(x, params.w_h, params.b_h) + affine(r * h_prev, params.u_h))
    return (1 - z) * h_prev + z * h_tilde


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def set_deterministic(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels; bit-reproducible on CPU."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

REL_FLOOR = 1e-5
# Central-difference step. 1e-6 loses ~1e-4 relative accuracy to round-off on
# gradients near 1e-6 when the loss is O(1); 1e-5 keeps both round-off and the
# O(eps^2) truncation term well below the tolerances used here.
FD_EPSILON = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps round-off on near-zero
    gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst: str
    checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    inputs: Mapping[str, torch.Tensor] | None = None,
    epsilon: float = FD_EPSILON,
    seed: int = 0,
    max_entries: int | None = None,
    name: str = "fragment",
) -> GradCheckResult:
    """Compare autograd gradients against float64 central differences.

    ``tensors`` are the leaves to differentiate (parameters and, optionally,
    inputs); they are perturbed in place and restored. ``loss_fn`` receives
    ``inputs`` and must return a scalar. When ``max_entries`` is set, that many
    coordinates per tensor are sampled (seeded) instead of all of them.
    """
    inputs = inputs or {}
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    for tname, t in items:
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors, {tname} is {t.dtype}")
    leaves = [t for _, t in items]
    for t in leaves:
        t.grad = None
        t.requires_grad_(True)
    loss = loss_fn(inputs)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"{name}: non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_tensor: dict[str, float] = {}
    with torch.no_grad():
        for (tname, t), g in zip(items, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
            t_worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = loss_fn(inputs).item()
                flat[i] = orig - epsilon
                f_minus = loss_fn(inputs).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * epsilon)
                err = relative_error(gflat[i].item(), numeric)
                checked += 1
                if err > t_worst:
                    t_worst = err
                if err > worst:
                    worst, worst_name = err, f"{tname}[{int(i)}]"
            per_tensor[tname] = t_worst
    return GradCheckResult(name, worst, worst_name, checked, per_tensor)


def grad_check_functional(
    fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    epsilon: float = FD_EPSILON,
    seed: int = 0,
    max_entries: int | None = None,
    name: str = "fragment",
    chunk: int = 512,
) -> GradCheckResult:
    """Like :func:`grad_check`, for a pure ``fn(values) -> scalar``.

    The perturbed evaluations are batched with ``torch.func.vmap`` (``chunk``
    coordinates at a time, each shifted by +eps and -eps), which is what keeps
    whole-network checks over every coordinate fast. ``fn`` must not branch on
    tensor values.
    """
    from torch.func import vmap

    base = {k: t.detach().clone() for k, t in tensors.items()}
    for k, t in base.items():
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors, {k} is {t.dtype}")
    leaves = {k: t.clone().requires_grad_(True) for k, t in base.items()}
    loss = fn(leaves)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"{name}: non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_tensor: dict[str, float] = {}
    with torch.no_grad():
        for (tname, t), g in zip(base.items(), grads):
            gflat = (torch.zeros_like(t) if g is None else g).reshape(-1)
            n = t.numel()
            idx = np.arange(n)
            if max_entries is not None and n > max_entries:
                idx = np.sort(rng.choice(n, size=max_entries, replace=False))

            def shifted(w, tname=tname):
                return fn({**base, tname: w})

            numeric = []
            for lo in range(0, len(idx), chunk):
                sel = torch.as_tensor(idx[lo:lo + chunk])
                c = len(sel)
                stack = t.reshape(1, -1).repeat(2 * c, 1)
                rows = torch.arange(c)
                stack[rows, sel] += epsilon
                stack[rows + c, sel] -= epsilon
                vals = vmap(shifted)(stack.reshape(2 * c, *t.shape))
                numeric.append((vals[:c] - vals[c:]) / (2 * epsilon))
            numeric = torch.cat(numeric) if numeric else torch.zeros(0, dtype=t.dtype)
            a = gflat[torch.as_tensor(idx)]
            err = (a - numeric).abs() / torch.maximum(torch.maximum(a.abs(), numeric.abs()),
                                                       torch.tensor(REL_FLOOR, dtype=t.dtype))
            checked += len(idx)
            t_worst = float(err.max()) if len(idx) else 0.0
            per_tensor[tname] = t_worst
            if t_worst > worst:
                worst, worst_name = t_worst, f"{tname}[{int(idx[int(err.argmax())])}]"
    return GradCheckResult(name, worst, worst_name, checked, per_tensor)
