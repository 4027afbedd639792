"""Temporal template tracking over the search spaces.

Each stream carries a template T_o and a search space S (M frames). Per
frame the updater fuses T_o with the previous template,

    u   = FNN([T_o, T_{i-1}])
    h_i = GRU(u, h_{i-1})
    T_i = (h_i + T_o) * S_i

and the sequence [T_1..T_M] is the stream's track. All k+2 streams, forward
and reversed, have their own updater weights and are run as one stacked
recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .generator import TargetBundle
from .nnmath import Affine, GRUCell, affine, gru_step, leaky_relu


@dataclass
class TrackTensor:
    F_obj: torch.Tensor    # [..., k, M, D]
    F_act: torch.Tensor    # [..., M, D]
    F_sem: torch.Tensor    # [..., M, D]
    fused_fwd: torch.Tensor
    fused_rev: torch.Tensor
    F_tilde: torch.Tensor  # [..., M, 2D]


class Updaters(nn.Module):
    """``streams`` independent FNN+GRU template updaters."""

    def __init__(self, D: int, streams: int, generator: torch.Generator, slope: float = 0.01):
        super().__init__()
        self.slope = slope
        self.fnn_in = Affine(2 * D, D, generator, streams=streams)
        self.fnn_out = Affine(D, D, generator, streams=streams)
        self.gru = GRUCell(D, D, generator, streams=streams)

    def fnn(self, x: torch.Tensor) -> torch.Tensor:
        return self.fnn_out(leaky_relu(self.fnn_in(x), self.slope))

    def select(self, idx) -> "UpdaterView":
        return UpdaterView((self.fnn_in.W[idx], self.fnn_in.b[idx]),
                           (self.fnn_out.W[idx], self.fnn_out.b[idx]),
                           self.gru.select(idx), self.slope)


class UpdaterView:
    """Read-only slice of stacked updaters, usable wherever ``Updaters`` is."""

    def __init__(self, fnn_in, fnn_out, gru, slope):
        self.fnn_in, self.fnn_out, self.gru, self.slope = fnn_in, fnn_out, gru, slope

    def fnn(self, x: torch.Tensor) -> torch.Tensor:
        return affine(leaky_relu(affine(x, *self.fnn_in), self.slope), *self.fnn_out)


def track(T_o: torch.Tensor, S: torch.Tensor, upd, use_gru: bool = True
          ) -> torch.Tensor:
    """Run the template recurrence for stacked streams.

    T_o: [..., P, D]; S: [..., P, M, D] -> [..., P, M, D]. ``upd=None`` bypasses
    the updater entirely (T_i = T_o * S_i); ``use_gru=False`` feeds the FNN
    output straight through in place of the GRU state.
    """
    if upd is None:
        return T_o.unsqueeze(-2) * S
    M = S.shape[-2]
    T_prev = T_o
    h = torch.zeros_like(T_o)
    out = []
    for i in range(M):
        u = upd.fnn(torch.cat([T_o, T_prev], dim=-1))
        h = gru_step(upd.gru, u, h) if use_gru else u
        T_prev = (h + T_o) * S[..., i, :]
        out.append(T_prev)
    return torch.stack(out, dim=-2)


def track_stream(T_o: torch.Tensor, S: torch.Tensor, upd: "Updaters", stream: int = 0,
                 use_gru: bool = True) -> torch.Tensor:
    """Single stream: T_o [D], S [M, D], using updater number ``stream``."""
    view = upd.select(slice(stream, stream + 1))
    return track(T_o.unsqueeze(-2), S.unsqueeze(-3), view, use_gru).squeeze(-3)


def fuse_tracks(F: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None) -> torch.Tensor:
    """F [..., P, M, D] -> per frame concat of the P streams -> affine to D."""
    per_frame = F.movedim(-3, -2).flatten(-2)  # [..., M, P*D]
    return affine(per_frame, W, b)


def assemble(fwd: torch.Tensor, rev: torch.Tensor | None) -> torch.Tensor:
    """Forward features first, reversed second; missing reverse is zero-filled."""
    if rev is None:
        rev = torch.zeros_like(fwd)
    return torch.cat([fwd, rev], dim=-1)


class TemporalTracker(nn.Module):
    def __init__(self, cfg, generator: torch.Generator):
        super().__init__()
        self.cfg = cfg
        P, D = cfg.k + 2, cfg.D
        # streams [0, P) track forward, [P, 2P) track the time-reversed input
        self.updaters = Updaters(D, 2 * P, generator, cfg.leaky_slope)
        self.fuse_fwd = Affine(P * D, D, generator)
        self.fuse_rev = Affine(P * D, D, generator)

    def forward(self, bundle: TargetBundle) -> TrackTensor:
        cfg = self.cfg
        P = cfg.k + 2
        T, S = bundle.streams()
        upd = None if cfg.no_dtu else self.updaters
        if cfg.no_reverse:
            F = track(T, S, upd.select(slice(0, P)) if upd is not None else None,
                      use_gru=not cfg.no_gru)
            F_rev = None
        else:
            both = track(torch.cat([T, T], dim=-2), torch.cat([S, S.flip(-2)], dim=-3),
                         upd, use_gru=not cfg.no_gru)
            F, F_rev = both[..., :P, :, :], both[..., P:, :, :]
        fused = fuse_tracks(F, self.fuse_fwd.W, self.fuse_fwd.b)
        fused_rev = None
        if F_rev is not None:
            fused_rev = fuse_tracks(F_rev, self.fuse_rev.W, self.fuse_rev.b).flip(-2)
        k = cfg.k
        return TrackTensor(F[..., :k, :, :], F[..., k, :, :], F[..., k + 1, :, :],
                           fused, fused_rev, assemble(fused, fused_rev))
