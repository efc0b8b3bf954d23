"""Per-query GRU aggregation over a window of fused queries, and the detection heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DimensionError, GruCell, Mlp


def time_encoding(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal table indexed by window-relative position (0 = oldest frame)."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.to(dtype)


class TemporalAggregator(nn.Module):
    """``h_tau = GRU(q_tilde_tau + pi(tau) [; ego(dpose_tau)], h_{tau-1})`` with ``h`` starting at zero.

    A single GRU is shared across queries and frames. With ``ego_embedding`` the
    frame-to-frame pose change (dtheta, dx, dy) is embedded and concatenated to the input.
    """

    def __init__(self, c_q: int = 64, d_h: int = 64, ego_embedding: bool = True, activation: str = "relu"):
        super().__init__()
        self.c_q = c_q
        self.d_h = d_h
        self.ego_embedding = ego_embedding
        self.gru = GruCell(2 * c_q if ego_embedding else c_q, d_h)
        self.ego_mlp = Mlp([3, 32, c_q], activation) if ego_embedding else None

    def forward(self, q_seq: torch.Tensor, ego_deltas: torch.Tensor | None = None):
        """q_seq (T, ..., M, C_q), ego_deltas (T, ..., 3) -> (q_bar (..., M, D_h), hidden states (T, ..., M, D_h))."""
        if q_seq.shape[0] < 1:
            raise DimensionError("temporal window must hold at least one frame")
        if q_seq.shape[-1] != self.c_q:
            raise DimensionError(f"fused queries have width {q_seq.shape[-1]}, expected {self.c_q}")
        steps = q_seq.shape[0]
        pi = time_encoding(steps, self.c_q, q_seq.dtype)
        h = q_seq.new_zeros(*q_seq.shape[1:-1], self.d_h)
        states = []
        for tau in range(steps):
            x = q_seq[tau] + pi[tau]
            if self.ego_mlp is not None:
                d = ego_deltas[tau] if ego_deltas is not None else q_seq.new_zeros(*q_seq.shape[1:-2], 3)
                e = self.ego_mlp(d).unsqueeze(-2).expand(*x.shape[:-1], self.c_q)
                x = torch.cat([x, e], dim=-1)
            h = self.gru(x, h)
            states.append(h)
        return h, torch.stack(states)


def tqa_aggregate(q_seq, params: TemporalAggregator, ego_deltas=None) -> torch.Tensor:
    return params(q_seq, ego_deltas)[0]


@dataclass
class HeadOutput:
    logits: torch.Tensor  # (..., M, K + 1); the last class is background
    boxes: torch.Tensor  # (..., M, 6): cx, cy, l, w, sin, cos

    def __getitem__(self, idx) -> "HeadOutput":
        return HeadOutput(self.logits[idx], self.boxes[idx])

    @property
    def theta(self) -> torch.Tensor:
        return torch.atan2(self.boxes[..., 4], self.boxes[..., 5])


@dataclass
class Detection:
    logits: np.ndarray
    cx: float
    cy: float
    l: float
    w: float
    sin: float
    cos: float

    @property
    def theta(self) -> float:
        return math.atan2(self.sin, self.cos)


class DetectionHead(nn.Module):
    """Class logits and an oriented box per query.

    Centres decode affinely onto the sensing area as offsets from the query's reference
    point (normalized coordinates, zero when none is given), sizes through softplus, and
    the heading as a unit (sin, cos) pair.
    """

    def __init__(self, d_h: int = 64, n_classes: int = 3, area_x=(0.0, 32.0), area_y=(-16.0, 16.0),
                 size_scale: float = 4.0, activation: str = "relu"):
        super().__init__()
        self.n_classes = n_classes
        self.cls = Mlp([d_h, d_h, n_classes + 1], activation)
        self.box = Mlp([d_h, d_h, 6], activation)
        self.area_x = tuple(area_x)
        self.area_y = tuple(area_y)
        self.size_scale = size_scale

    def decode(self, raw: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        (x0, x1), (y0, y1) = self.area_x, self.area_y
        offset = raw[..., :2] if ref is None else raw[..., :2] + ref
        cx = (x0 + x1) / 2 + (x1 - x0) / 2 * offset[..., 0]
        cy = (y0 + y1) / 2 + (y1 - y0) / 2 * offset[..., 1]
        size = self.size_scale * F.softplus(raw[..., 2:4])
        norm = torch.sqrt(raw[..., 4] ** 2 + raw[..., 5] ** 2).clamp_min(1e-12)
        return torch.cat([cx[..., None], cy[..., None], size, (raw[..., 4:6] / norm[..., None])], dim=-1)

    def forward(self, q_bar: torch.Tensor, ref: torch.Tensor | None = None) -> HeadOutput:
        """q_bar (..., M, D_h); ref (M, 2) reference points."""
        return HeadOutput(self.cls(q_bar), self.decode(self.box(q_bar), ref))


def detect(q_bar: torch.Tensor, head: DetectionHead, ref: torch.Tensor | None = None) -> list[Detection]:
    out = head(q_bar, ref)
    logits = out.logits.detach().cpu().numpy()
    boxes = out.boxes.detach().cpu().numpy()
    return [Detection(logits[m], *map(float, boxes[m])) for m in range(len(boxes))]
