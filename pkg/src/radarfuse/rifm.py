"""Query-level radar/image fusion: learned object queries cross-attend to each modality, then an MLP fuses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import RadarTokens, canonical_order, masked_logits
from .numerics import Mlp


class CrossAttention(nn.Module):
    """Multi-head cross-attention returning ``softmax(QK^T / sqrt(d)) V`` (no output projection)."""

    def __init__(self, dim_q: int, dim_kv: int, dim_out: int, heads: int = 1):
        super().__init__()
        if dim_out % heads:
            raise ValueError(f"output width {dim_out} is not divisible by {heads} heads")
        self.heads = heads
        self.dim_out = dim_out
        self.q = nn.Linear(dim_q, dim_out)
        self.k = nn.Linear(dim_kv, dim_out)
        self.v = nn.Linear(dim_kv, dim_out)

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor, key_bias: torch.Tensor | None = None,
                return_weights: bool = False, key_mask: torch.Tensor | None = None,
                logit_bias: torch.Tensor | None = None):
        """queries (M, Dq); tokens (..., N, Dkv) -> (..., M, dim_out).

        ``key_bias`` (..., N, dim_out) is added to the keys, ``logit_bias`` (..., M, N) to the
        scaled logits of every head, and ``key_mask`` (..., N) hides padding.

        Keys and values are both projections of ``tokens``. With few queries and many
        tokens the projections are folded onto the query side instead of applied to
        every token: ``q.(W_k u + b_k) = (W_k^T q).u + q.b_k`` and, since attention rows
        sum to one, ``sum_j a_j (W_v u_j + b_v) = W_v (sum_j a_j u_j) + b_v``.
        """
        h = self.heads
        dh = self.dim_out // h
        m = queries.shape[0]
        q = self.q(queries).reshape(m, h, dh).transpose(0, 1)  # (h, M, dh)
        w_k = self.k.weight.reshape(h, dh, -1)  # (h, dh, Dkv)
        q_in = q @ w_k  # (h, M, Dkv)
        logits = tokens.unsqueeze(-3) @ q_in.transpose(-1, -2)  # (..., h, N, M)
        logits = logits.transpose(-1, -2) + (q * self.k.bias.reshape(h, 1, dh)).sum(-1, keepdim=True)
        if key_bias is not None:
            kb = key_bias.reshape(*key_bias.shape[:-1], h, dh).transpose(-2, -3)  # (..., h, N, dh)
            logits = logits + q @ kb.transpose(-1, -2)
        logits = logits / math.sqrt(dh)
        if logit_bias is not None:
            logits = logits + logit_bias.unsqueeze(-3)
        logits = masked_logits(logits, None if key_mask is None else key_mask[..., None, :])
        w = torch.softmax(logits, dim=-1)  # (..., h, M, N)
        pooled = w @ tokens.unsqueeze(-3)  # (..., h, M, Dkv)
        w_v = self.v.weight.reshape(h, dh, -1)
        out = pooled @ w_v.transpose(-1, -2) + self.v.bias.reshape(h, 1, dh)  # (..., h, M, dh)
        out = out.transpose(-2, -3).reshape(*out.shape[:-3], m, self.dim_out)
        return (out, w) if return_weights else out


@dataclass
class Evidence:
    """One modality's cross-attention result per query."""

    q: torch.Tensor  # (..., M, C_q)
    xy: torch.Tensor  # (..., M, 2) attention-weighted ground position of the attended tokens
    present: torch.Tensor  # (...,) bool, False when the modality had no tokens
    weights: torch.Tensor | None  # (..., heads, M, N)


def grid_points(n: int) -> torch.Tensor:
    """(n, 2) points in [-1, 1]^2: cell centres of the smallest near-square grid holding n, row-major."""
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    pts = [(2 * (i + 0.5) / rows - 1, 2 * (j + 0.5) / cols - 1) for i in range(rows) for j in range(cols)]
    return torch.tensor(pts[:n], dtype=torch.float32)


def _softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class Rifm(nn.Module):
    """Holds the M base queries and fuses per-frame radar and image evidence into ``q_tilde`` (M, C_q).

    Each query owns a learned reference point on the water plane (normalized area
    coordinates, initialized on a grid). Both cross-attentions add the locality bias
    ``-gamma * |p_j - r_m|^2`` between token j's ground position and the reference, with
    ``gamma = softplus(gamma_raw)`` learned. Radar keys also carry an MLP encoding of token
    positions; image keys and values carry the image positional codes. An empty radar frame
    (or ``radar_enabled=False``) gives ``q_r = 0`` and fusion proceeds on image evidence alone.
    """

    def __init__(self, n_queries: int = 16, c_q: int = 64, c_r: int = 64, c_img: int = 64, heads: int = 1,
                 activation: str = "relu", area_x=(0.0, 32.0), area_y=(-16.0, 16.0), z_scale: float = 2.0,
                 radar_enabled: bool = True, locality_init: float = 4.0):
        super().__init__()
        self.c_q = c_q
        self.radar_enabled = radar_enabled
        self.queries = nn.Parameter(torch.randn(n_queries, c_q))
        self.reference = nn.Parameter(grid_points(n_queries))
        self.gamma_raw = nn.Parameter(torch.tensor(_softplus_inverse(locality_init)))
        self.anchor_mix_raw = nn.Parameter(torch.tensor(0.0))
        self.ln_q = nn.LayerNorm(c_q)
        self.ln_r = nn.LayerNorm(c_r)
        self.ln_img = nn.LayerNorm(c_img)
        self.radar_attn = CrossAttention(c_q, c_r, c_q, heads)
        self.radar_pos = Mlp([3, c_q, c_q, c_q], activation)
        self.img_attn = CrossAttention(c_q, c_img, c_q, heads)
        self.fuse = Mlp([2 * c_q, c_q, c_q], activation)
        mid = [(area_x[0] + area_x[1]) / 2, (area_y[0] + area_y[1]) / 2, 0.0]
        half = [(area_x[1] - area_x[0]) / 2, (area_y[1] - area_y[0]) / 2, z_scale]
        self.register_buffer("pos_mid", torch.tensor(mid), persistent=False)
        self.register_buffer("pos_half", torch.tensor(half), persistent=False)

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def gamma(self) -> torch.Tensor:
        return F.softplus(self.gamma_raw)

    def locality(self, ground_xy: torch.Tensor) -> torch.Tensor:
        """(..., N, 2) normalized ground positions -> (..., M, N) logit bias."""
        diff = ground_xy.unsqueeze(-3) - self.reference[:, None, :]
        return -self.gamma * (diff * diff).sum(-1)

    def radar_evidence(self, radar: RadarTokens) -> Evidence:
        """Radar cross-attention for one frame (M, .) or a padded batch (B, M, .).

        Frames without points give ``q = 0`` and report ``present = False``.
        """
        q = self.ln_q(self.queries)
        lead = radar.tokens.shape[:-2]
        if not self.radar_enabled or len(radar) == 0:
            zeros = q.new_zeros(*lead, self.n_queries, self.c_q)
            xy = self.reference.expand(*lead, -1, -1)
            return Evidence(zeros, xy, torch.zeros(lead, dtype=torch.bool), None)
        tokens, positions, inv = radar.tokens, radar.positions, None
        if tokens.dim() == 2 and len(tokens) > 1:
            order = canonical_order(torch.cat([positions, tokens], dim=-1))
            if not torch.equal(order, torch.arange(len(order))):
                tokens, positions, inv = tokens[order], positions[order], torch.argsort(order)
        pos = (positions - self.pos_mid.to(q.dtype)) / self.pos_half.to(q.dtype)
        u = self.ln_r(tokens)
        out, w = self.radar_attn(q, u, key_bias=self.radar_pos(pos), return_weights=True, key_mask=radar.mask,
                                 logit_bias=self.locality(pos[..., :2]))
        xy = (w @ pos[..., None, :, :2]).mean(-3)
        present = torch.ones(lead, dtype=torch.bool) if radar.mask is None else radar.mask.any(-1)
        out = torch.where(present[..., None, None], out, torch.zeros_like(out))
        return Evidence(out, xy, present, w if inv is None else w[..., inv])

    def image_evidence(self, tokens: torch.Tensor, pos: torch.Tensor, ground_xy: torch.Tensor) -> Evidence:
        """tokens (..., S, C_img), codes (S, C_img), token ground positions (S, 2)."""
        q = self.ln_q(self.queries)
        u = self.ln_img(tokens) + pos
        out, w = self.img_attn(q, u, return_weights=True, logit_bias=self.locality(ground_xy))
        xy = (w @ ground_xy).mean(-3)
        return Evidence(out, xy, torch.ones(tokens.shape[:-2], dtype=torch.bool), w)

    def radar_queries(self, radar: RadarTokens, return_weights: bool = False):
        ev = self.radar_evidence(radar)
        return (ev.q, ev.weights) if return_weights else ev.q

    def image_queries(self, tokens: torch.Tensor, pos: torch.Tensor, ground_xy: torch.Tensor,
                      return_weights: bool = False):
        ev = self.image_evidence(tokens, pos, ground_xy)
        return (ev.q, ev.weights) if return_weights else ev.q

    def anchors(self, radar: Evidence, image: Evidence) -> torch.Tensor:
        """Per-query box anchor: attended image position pulled toward the attended radar position."""
        mix = torch.sigmoid(self.anchor_mix_raw)
        blended = image.xy + mix * (radar.xy - image.xy)
        return torch.where(radar.present[..., None, None], blended, image.xy)

    def fuse_queries(self, q_r: torch.Tensor, q_img: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([q_r, q_img], dim=-1))

    def forward(self, radar: RadarTokens, img_tokens: torch.Tensor, img_pos: torch.Tensor,
                img_xy: torch.Tensor) -> torch.Tensor:
        return self.fuse_queries(self.radar_queries(radar), self.image_queries(img_tokens, img_pos, img_xy))


def rifm_fuse(params: Rifm, radar: RadarTokens, image) -> torch.Tensor:
    return params(radar, image.tokens, image.pos, image.ground_xy)
