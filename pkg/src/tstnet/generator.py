"""Cross-modal target generation: search spaces, original templates, filters.

Attention here is a sigmoid gate over every (query, key) pair rather than a
softmax distribution, so rows of the weight matrix do not sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoder import EncodedEpisode
from .nnmath import Affine, DimensionError, affine, leaky_relu, maxpool_axis, sigmoid, weight


class ZeroNormError(ValueError):
    pass


@dataclass
class TargetBundle:
    S_o: torch.Tensor      # [..., k, M, D]
    S_a: torch.Tensor      # [..., M, D]
    S_s: torch.Tensor      # [..., M, D]
    T_o_obj: torch.Tensor  # [..., k, D]
    T_o_act: torch.Tensor  # [..., D]
    T_o_sem: torch.Tensor  # [..., D]

    def streams(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack into k+2 (template, search) streams: objects, activity, semantic."""
        T = torch.cat([self.T_o_obj, self.T_o_act.unsqueeze(-2), self.T_o_sem.unsqueeze(-2)], dim=-2)
        S = torch.cat([self.S_o, self.S_a.unsqueeze(-3), self.S_s.unsqueeze(-3)], dim=-3)
        return T, S


def object_self_attention(V_o: torch.Tensor, W1: torch.Tensor, W2: torch.Tensor) -> torch.Tensor:
    """sigmoid(V W1 (V W2)^T) V / sqrt(D) within each frame; V_o is [..., K, D]."""
    D = V_o.shape[-1]
    scores = affine(V_o, W1) @ affine(V_o, W2).transpose(-1, -2)
    return sigmoid(scores) @ V_o / math.sqrt(D)


def query_guided_attention(X: torch.Tensor, Y: torch.Tensor, W3: torch.Tensor, W4: torch.Tensor,
                           W5: torch.Tensor, y_mask: torch.Tensor | None = None
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """X [..., A, D] gated over Y [..., B, D]; returns (weights [..., A, B], out [..., A, D])."""
    D = X.shape[-1]
    w = sigmoid(affine(X, W3) @ affine(Y, W4).transpose(-1, -2) / math.sqrt(D))
    if y_mask is not None:
        w = w * y_mask.unsqueeze(-2).to(w.dtype)
    return w, w @ affine(Y, W5)


def word_object_affinity(Q: torch.Tensor, V: torch.Tensor, eps: float | None = None
                         ) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine affinity of every word with every object, and the affinity-weighted sum.

    Q is [..., N, D], V is [..., K, D]. With ``eps=None`` a zero-norm row is an
    error; otherwise norms are clamped to ``eps`` (padded rows give zero).
    """
    qn = Q.norm(dim=-1, keepdim=True)
    vn = V.norm(dim=-1, keepdim=True)
    if eps is None:
        for label, n in (("word", qn), ("object", vn)):
            bad = (n.squeeze(-1) == 0).nonzero()
            if len(bad):
                raise ZeroNormError(f"zero-norm {label} vector at index {tuple(bad[0].tolist())}")
    else:
        qn, vn = qn.clamp_min(eps), vn.clamp_min(eps)
    w = (Q / qn) @ (V / vn).transpose(-1, -2)
    return w, w @ V


class QGAttention(nn.Module):
    """One independent (W3, W4, W5) set for one attention site."""

    def __init__(self, D: int, generator: torch.Generator):
        super().__init__()
        self.W3 = weight((D, D), generator)
        self.W4 = weight((D, D), generator)
        self.W5 = weight((D, D), generator)

    def forward(self, X, Y, y_mask=None):
        return query_guided_attention(X, Y, self.W3, self.W4, self.W5, y_mask)


def apply_filters(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor, slope: float) -> torch.Tensor:
    """Run k stacked filters: x [..., R, D] -> [..., k, R, D]."""
    k = W.shape[0]
    xs = x.unsqueeze(-3).expand(*x.shape[:-2], k, *x.shape[-2:])
    # stacked affine expects the stream axis second to last
    y = affine(xs.transpose(-3, -2), W, b).transpose(-3, -2)
    return leaky_relu(y, slope)


class TargetGenerator(nn.Module):
    def __init__(self, cfg, generator: torch.Generator):
        super().__init__()
        D = cfg.D
        self.cfg = cfg
        self.W1 = weight((D, D), generator)
        self.W2 = weight((D, D), generator)
        self.obj_words = QGAttention(D, generator)
        self.act_words = QGAttention(D, generator)
        self.act_objs = QGAttention(D, generator)
        # filter i serves both search space i and template i
        self.obj_filters = Affine(D, D, generator, streams=cfg.k)
        self.act_filter = Affine(D, D, generator)
        self.sem_filter = Affine(D, D, generator)

    # -- search space representation -------------------------------------
    def build_object_search(self, V_hat: torch.Tensor, enc: EncodedEpisode) -> torch.Tensor:
        cfg = self.cfg
        if cfg.no_ssr:
            V_q = enc.V_o
        else:
            # broadcast the query over frames: [..., 1, N, D] against [..., M, K, D]
            Q = enc.Q_l.unsqueeze(-3)
            mask = enc.word_mask.unsqueeze(-2) if enc.word_mask is not None else None
            _, V_q = self.obj_words(V_hat, Q, mask)
        if cfg.no_filter:
            pooled = V_q.mean(dim=-2)
            return pooled.unsqueeze(-3).expand(*pooled.shape[:-2], cfg.k, *pooled.shape[-2:])
        # [..., M, K, D] -> [..., M, k, K, D] -> max over K -> [..., k, M, D]
        filtered = apply_filters(V_q, self.obj_filters.W, self.obj_filters.b, cfg.leaky_slope)
        return maxpool_axis(filtered, -2).transpose(-3, -2)

    def build_activity_search(self, enc: EncodedEpisode) -> torch.Tensor:
        if self.cfg.no_ssr:
            V_q = enc.V_a
        else:
            _, V_q = self.act_words(enc.V_a, enc.Q_l, enc.word_mask)
        if self.cfg.no_filter:
            return V_q
        return leaky_relu(self.act_filter(V_q), self.cfg.leaky_slope)

    def semantic_features(self, V_hat: torch.Tensor, enc: EncodedEpisode) -> torch.Tensor:
        if self.cfg.no_ssr:
            return enc.V_a
        # each activity frame (1 x D) attends over that frame's K objects
        _, V_s = self.act_objs(enc.V_a.unsqueeze(-2), V_hat)
        return V_s.squeeze(-2)

    def build_semantic_search(self, V_s: torch.Tensor, Q_g: torch.Tensor) -> torch.Tensor:
        return V_s * Q_g.unsqueeze(-2)

    # -- template generation ---------------------------------------------
    def generate_templates(self, Q_hat_o, Q_hat_a, Q_hat_s, word_mask=None):
        """Filter the affinity-enhanced queries and pool over words and frames.

        Q_hat_o, Q_hat_a: [..., N, M, D]; Q_hat_s: [..., M, D] (the global
        query acting as a single word).
        """
        cfg, slope = self.cfg, self.cfg.leaky_slope
        nm_mask = None
        if word_mask is not None:
            nm_mask = word_mask[..., :, None, None]  # [..., N, 1, 1]
        if cfg.no_filter:
            def pool(x, m):
                if m is None:
                    return x.mean(dim=(-3, -2))
                m = m.to(x.dtype).expand(*x.shape[:-1], 1)
                return (x * m).sum(dim=(-3, -2)) / m.sum(dim=(-3, -2))
            T_obj = pool(Q_hat_o, nm_mask).unsqueeze(-2).expand(*Q_hat_o.shape[:-3], cfg.k, cfg.D)
            return T_obj, pool(Q_hat_a, nm_mask), Q_hat_s.mean(dim=-2)
        # [..., N, M, D] -> [..., k, N, M, D]
        f_o = apply_filters(Q_hat_o.flatten(-3, -2), self.obj_filters.W, self.obj_filters.b, slope)
        f_o = f_o.unflatten(-2, Q_hat_o.shape[-3:-1])
        f_a = leaky_relu(self.act_filter(Q_hat_a), slope)
        f_s = leaky_relu(self.sem_filter(Q_hat_s), slope)
        m_o = nm_mask.unsqueeze(-4) if nm_mask is not None else None
        T_obj = maxpool_axis(f_o, (-3, -2), mask=m_o)
        T_act = maxpool_axis(f_a, (-3, -2), mask=nm_mask)
        T_sem = maxpool_axis(f_s, -2)
        return T_obj, T_act, T_sem

    def forward(self, enc: EncodedEpisode) -> TargetBundle:
        cfg = self.cfg
        if enc.V_o.shape[-2] < cfg.k:
            raise DimensionError(f"k={cfg.k} filters need at least k objects, got {enc.V_o.shape[-2]}")
        V_hat = enc.V_o if cfg.no_ssr else object_self_attention(enc.V_o, self.W1, self.W2)
        S_o = self.build_object_search(V_hat, enc)
        S_a = self.build_activity_search(enc)
        V_s = self.semantic_features(V_hat, enc)
        S_s = self.build_semantic_search(V_s, enc.Q_g)

        if cfg.no_tg_filters_shared:
            T = enc.Q_g
            T_obj = T.unsqueeze(-2).expand(*T.shape[:-1], cfg.k, cfg.D)
            return TargetBundle(S_o, S_a, S_s, T_obj, T, T)

        # per frame affinities: words [..., 1, N, D] vs objects [..., M, K, D]
        Q = enc.Q_l.unsqueeze(-3)
        _, Qh_o = word_object_affinity(Q, enc.V_o, eps=1e-12)           # [..., M, N, D]
        _, Qh_a = word_object_affinity(Q, enc.V_a.unsqueeze(-2), eps=1e-12)
        _, Qh_s = word_object_affinity(enc.Q_g[..., None, None, :], V_s.unsqueeze(-2), eps=1e-12)
        Qh_o, Qh_a = Qh_o.transpose(-3, -2), Qh_a.transpose(-3, -2)      # [..., N, M, D]
        T_obj, T_act, T_sem = self.generate_templates(Qh_o, Qh_a, Qh_s.squeeze(-2), enc.word_mask)
        return TargetBundle(S_o, S_a, S_s, T_obj, T_act, T_sem)
