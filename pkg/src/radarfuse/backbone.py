"""Dual-stream radar backbone: physics-aware kNN edge aggregation plus distance-decayed self-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .numerics import Mlp
from .pir import PirOutput


@dataclass
class LocalStreamConfig:
    k: int = 8
    lambda_v: float = 1.0
    lambda_r: float = 0.1
    widths: tuple[int, ...] = (32, 64)  # output width of each edge layer; the last one is C_loc
    knn_normalized: bool = False  # measure the kNN metric on normalized attributes instead of raw v / rcs

    def validate(self) -> None:
        bad = []
        if self.k < 1:
            bad.append("k")
        if self.lambda_v < 0:
            bad.append("lambda_v")
        if self.lambda_r < 0:
            bad.append("lambda_r")
        if not self.widths or min(self.widths) < 1:
            bad.append("widths")
        if bad:
            raise ConfigError(f"invalid local stream config: {', '.join(bad)}", bad)


def physics_knn(points: np.ndarray, k: int, lambda_v: float, lambda_r: float) -> np.ndarray:
    """Indices of the k nearest other points under

        d_ij^2 = |x_i - x_j|^2 + lambda_v (v_i - v_j)^2 + lambda_r (rcs_i - rcs_j)^2

    Returns an (N, min(k, N - 1)) int array; ties go to the smaller index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    n = len(pts)
    kk = max(0, min(k, n - 1))
    if kk == 0:
        return np.zeros((n, 0), dtype=np.int64)
    dx = pts[:, None, 0] - pts[None, :, 0]
    dy = pts[:, None, 1] - pts[None, :, 1]
    dz = pts[:, None, 2] - pts[None, :, 2]
    dv = pts[:, None, 3] - pts[None, :, 3]
    dr = pts[:, None, 4] - pts[None, :, 4]
    d2 = dx * dx + dy * dy + dz * dz + lambda_v * (dv * dv) + lambda_r * (dr * dr)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :kk].astype(np.int64)


def canonical_order(x: torch.Tensor) -> torch.Tensor:
    """Row order sorting (N, D) ``x`` lexicographically by column 0, then 1, and so on.

    Running a frame in this order makes every reduction see its addends in the same
    sequence whatever order the points arrived in, so outputs are bitwise equivariant.
    Rows that tie on every column are identical and may swap freely.
    """
    order = torch.arange(x.shape[0])
    for c in range(x.shape[1] - 1, -1, -1):
        order = order[torch.sort(x[order, c].detach(), stable=True).indices]
    return order


class LocalStream(nn.Module):
    """Edge features ``phi([f_i, f_j, a_j - a_i])`` max-pooled over each neighbourhood, stacked S times.

    ``a`` are the normalized attributes, so the deltas cover position, Doppler and RCS.
    A point without neighbours uses a single self-edge. Inputs are one frame (N, .) or a
    padded batch (B, N, .) with ``edge_mask`` (B, N, k) marking real edges.
    """

    def __init__(self, c_in: int, widths=(32, 64), activation: str = "relu", gate_edges: bool = False):
        super().__init__()
        layers = []
        c = c_in
        for w in widths:
            layers.append(Mlp([2 * c + 5, w], activation, activate_last=True))
            c = w
        self.phi = nn.ModuleList(layers)
        self.c_out = c
        self.gate_edges = gate_edges

    def forward(self, f: torch.Tensor, attrs: torch.Tensor, neighbors: torch.Tensor,
                gates: torch.Tensor | None = None, edge_mask: torch.Tensor | None = None) -> torch.Tensor:
        single = f.dim() == 2
        if single:
            f, attrs, neighbors = f[None], attrs[None], neighbors[None]
            gates = None if gates is None else gates[None]
            edge_mask = None if edge_mask is None else edge_mask[None]
        b, n = f.shape[:2]
        if n == 0:
            out = f.new_zeros(b, 0, self.c_out)
            return out[0] if single else out
        if neighbors.shape[-1] == 0:
            neighbors = torch.arange(n).expand(b, n)[..., None]
            edge_mask = None
        k = neighbors.shape[-1]
        bidx = torch.arange(b)[:, None, None]
        delta = attrs[bidx, neighbors] - attrs[:, :, None, :]
        for phi in self.phi:
            fi = f[:, :, None, :].expand(b, n, k, f.shape[-1])
            e = phi(torch.cat([fi, f[bidx, neighbors], delta], dim=-1))
            if self.gate_edges and gates is not None:
                e = e * gates[bidx, neighbors][..., None]
            if edge_mask is not None:
                e = e.masked_fill(~edge_mask[..., None], float("-inf"))
            f = e.max(dim=2).values
            if edge_mask is not None:
                f = f.masked_fill(~edge_mask.any(-1)[..., None], 0.0)
        return f[0] if single else f


def pairwise_sq_dist(pos: torch.Tensor) -> torch.Tensor:
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    return (diff * diff).sum(-1)


def _softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def masked_logits(logits: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    """Push padded keys to the dtype minimum; (..., N) mask broadcast over the query axis."""
    if key_mask is None:
        return logits
    return logits.masked_fill(~key_mask[..., None, :], torch.finfo(logits.dtype).min)


class SasaBlock(nn.Module):
    """Pre-norm Transformer block whose attention logits are ``QK^T / sqrt(d_k) - beta * D^2``.

    ``beta = softplus(beta_raw)`` keeps the decay nonnegative. Accepts (N, C) or a padded
    batch (B, N, C) with ``mask`` (B, N).
    """

    def __init__(self, c: int, heads: int = 1, ffn_mult: int = 2, activation: str = "relu",
                 beta_init: float = 0.02, decay: bool = True):
        super().__init__()
        if c % heads:
            raise ConfigError(f"width {c} is not divisible by {heads} heads", ["heads"])
        self.c = c
        self.heads = heads
        self.decay = decay
        self.ln1 = nn.LayerNorm(c)
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.out = nn.Linear(c, c)
        self.ln2 = nn.LayerNorm(c)
        self.ffn = Mlp([c, ffn_mult * c, c], activation)
        self.beta_raw = nn.Parameter(torch.tensor(_softplus_inverse(beta_init)))

    @property
    def beta(self) -> torch.Tensor:
        return F.softplus(self.beta_raw)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(*x.shape[:-1], self.heads, self.c // self.heads).transpose(-2, -3)

    def attention_weights(self, x: torch.Tensor, pos: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(..., heads, N, N) attention weights for already-normalized tokens ``x``."""
        q = self._split(self.q(x))
        k = self._split(self.k(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.c // self.heads)
        if self.decay:
            logits = logits - self.beta * pairwise_sq_dist(pos)[..., None, :, :]
        if mask is not None:
            logits = masked_logits(logits, mask[..., None, :])
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, pos: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2] == 0:
            return x
        h = self.ln1(x)
        attn = self.attention_weights(h, pos, mask)
        mixed = (attn @ self._split(self.v(h))).transpose(-2, -3)
        x = x + self.out(mixed.reshape(*x.shape))
        return x + self.ffn(self.ln2(x))


@dataclass
class RadarTokens:
    """Radar tokens of one frame (N, C_r), or of a padded batch (B, N, C_r) with ``mask`` (B, N)."""

    tokens: torch.Tensor
    positions: torch.Tensor  # compensated coordinates
    gates: torch.Tensor
    mask: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.tokens.shape[-2]

    def frame(self, i: int) -> "RadarTokens":
        n = int(self.mask[i].sum()) if self.mask is not None else self.tokens.shape[-2]
        return RadarTokens(self.tokens[i, :n], self.positions[i, :n], self.gates[i, :n])


@dataclass
class BackboneConfig:
    local: LocalStreamConfig = field(default_factory=LocalStreamConfig)
    sasa_blocks: int = 2
    heads: int = 1
    c_r: int = 64
    beta_init: float = 0.02
    sasa_enabled: bool = True
    gate_edges: bool = False


class RadarBackbone(nn.Module):
    """Local stream and SASA global stream over the gated point embeddings, fused by ``Proj``.

    The local features are enriched with the mean-pooled global summary via a context MLP
    before the per-point concatenation. With SASA disabled only the local stream is used
    (its own mean pool serves as the summary).
    """

    def __init__(self, c: int, config: BackboneConfig | None = None, activation: str = "relu"):
        super().__init__()
        cfg = config or BackboneConfig()
        cfg.local.validate()
        self.config = cfg
        self.local = LocalStream(c, cfg.local.widths, activation, gate_edges=cfg.gate_edges)
        c_loc = self.local.c_out
        if cfg.sasa_enabled:
            self.blocks = nn.ModuleList(
                SasaBlock(c, cfg.heads, activation=activation, beta_init=cfg.beta_init) for _ in range(cfg.sasa_blocks)
            )
            summary_dim = c
        else:
            self.blocks = nn.ModuleList()
            summary_dim = c_loc
        self.context = Mlp([c_loc + summary_dim, c_loc, c_loc], activation)
        self.proj = nn.Linear(c_loc + (c if cfg.sasa_enabled else 0), cfg.c_r)
        self.c_r = cfg.c_r

    def forward(self, pir_out: PirOutput, positions: torch.Tensor, attrs: torch.Tensor,
                neighbors: torch.Tensor, mask: torch.Tensor | None = None,
                edge_mask: torch.Tensor | None = None) -> RadarTokens:
        if attrs.dim() == 2 and len(attrs) > 1:
            order = canonical_order(attrs)
            if not torch.equal(order, torch.arange(len(order))):
                inv = torch.argsort(order)
                moved = PirOutput(pir_out.s[order], pir_out.g[order], pir_out.f0[order], pir_out.f0_gated[order])
                out = self._forward(moved, positions[order], attrs[order], inv[neighbors[order]], None, None)
                return RadarTokens(out.tokens[inv], positions, pir_out.g, None)
        return self._forward(pir_out, positions, attrs, neighbors, mask, edge_mask)

    def _forward(self, pir_out, positions, attrs, neighbors, mask, edge_mask) -> RadarTokens:
        f = pir_out.f0_gated
        n = f.shape[-2]
        if n == 0:
            return RadarTokens(f.new_zeros(*f.shape[:-1], self.c_r), positions, pir_out.g, mask)
        loc = self.local(f, attrs, neighbors, pir_out.g, edge_mask)
        glo = None
        if self.config.sasa_enabled:
            glo = f
            for blk in self.blocks:
                glo = blk(glo, positions, mask)
            pooled_src = glo
        else:
            pooled_src = loc
        if mask is None:
            summary = pooled_src.sum(-2) / n
        else:
            w = mask.to(f.dtype)[..., None]
            summary = (pooled_src * w).sum(-2) / w.sum(-2).clamp_min(1.0)
        loc = loc + self.context(torch.cat([loc, summary.unsqueeze(-2).expand(*loc.shape[:-1], -1)], dim=-1))
        fused = loc if glo is None else torch.cat([loc, glo], dim=-1)
        return RadarTokens(self.proj(fused), positions, pir_out.g, mask)


def radar_backbone_forward(pir_out, positions, attrs, neighbors, params: RadarBackbone) -> RadarTokens:
    return params(pir_out, positions, attrs, neighbors)
