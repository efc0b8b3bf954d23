"""Bipartite matching between queries and truths, and the set-prediction training losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .scene_sim import GroundTruthBox
from .tqa import HeadOutput


@dataclass
class LossWeights:
    cost_cls: float = 1.0
    cost_box: float = 1.0
    box: float = 5.0
    temp: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0
    smooth_l1_beta: float = 0.1

    def validate(self) -> None:
        bad = [k for k, v in vars(self).items() if not v >= 0]
        if self.smooth_l1_beta <= 0:
            bad.append("smooth_l1_beta")
        if bad:
            raise ConfigError(f"loss weights must be nonnegative: {', '.join(bad)}", bad)


@dataclass(frozen=True)
class BoxNorm:
    """Affine map of metric boxes onto the unit scale used by costs and losses."""

    area_x: tuple[float, float] = (0.0, 32.0)
    area_y: tuple[float, float] = (-16.0, 16.0)
    size_scale: float = 4.0

    def normalize(self, cxcylw):
        (x0, x1), (y0, y1) = self.area_x, self.area_y
        mid = [(x0 + x1) / 2, (y0 + y1) / 2, 0.0, 0.0]
        half = [(x1 - x0) / 2, (y1 - y0) / 2, self.size_scale, self.size_scale]
        if isinstance(cxcylw, torch.Tensor):
            return (cxcylw - cxcylw.new_tensor(mid)) / cxcylw.new_tensor(half)
        return (np.asarray(cxcylw) - np.asarray(mid)) / np.asarray(half)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query index, truth index), sorted by query
    unmatched: list[int] = field(default_factory=list)


def truths_tensor(truths: Sequence[GroundTruthBox], dtype=torch.float64) -> torch.Tensor:
    """(n, 6) rows of ``cls, cx, cy, l, w, theta``."""
    if not truths:
        return torch.zeros(0, 6, dtype=dtype)
    return torch.tensor([tuple(b) for b in truths], dtype=dtype)


def heading_term(pred_sincos: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """``1 - |cos(theta_hat - theta)|``, symmetric under a half turn."""
    cos_diff = pred_sincos[..., 1] * torch.cos(theta) + pred_sincos[..., 0] * torch.sin(theta)
    return 1.0 - cos_diff.abs()


def cost_matrix(out: HeadOutput, truths: Sequence[GroundTruthBox], weights: LossWeights,
                norm: BoxNorm) -> np.ndarray:
    """(M, n) matching cost ``w_cls * (1 - p_class) + w_box * (l1(centre, size) + heading term)``."""
    with torch.no_grad():
        gt = truths_tensor(truths, out.boxes.dtype)
        m = out.logits.shape[0]
        if len(gt) == 0:
            return np.zeros((m, 0))
        prob = torch.softmax(out.logits, dim=-1)
        c_cls = 1.0 - prob[:, gt[:, 0].long()]
        pb = norm.normalize(out.boxes[:, :4])
        tb = norm.normalize(gt[:, 1:5])
        c_box = (pb[:, None, :] - tb[None, :, :]).abs().sum(-1)
        c_box = c_box + heading_term(out.boxes[:, None, 4:6], gt[None, :, 5])
        return (weights.cost_cls * c_cls + weights.cost_box * c_box).cpu().numpy()


def _optimum(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Globally optimal assignment for a rectangular cost matrix, as (row, col) pairs sorted by row.

    Among optimal assignments the lexicographically smallest pair list wins: rows are
    decided in order, each taking the smallest column (or staying unmatched) that still
    admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    n_rows, n_cols = cost.shape
    best = _optimum(cost)
    tol = 1e-12 * (1.0 + abs(best) + float(np.abs(cost).max()))
    need = min(n_rows, n_cols)
    cols_left = list(range(n_cols))
    pairs: list[tuple[int, int]] = []
    spent = 0.0
    for m in range(n_rows):
        if len(pairs) == need:
            break
        later = cost[m + 1:]
        chosen = None
        for n in cols_left:
            rest = [c for c in cols_left if c != n]
            if len(pairs) + 1 + min(n_rows - m - 1, len(rest)) < need:
                continue
            sub = later[:, rest] if rest and len(later) else np.zeros((0, 0))
            if spent + cost[m, n] + _optimum(sub) <= best + tol:
                chosen = n
                break
        if chosen is None:
            continue  # row m stays unmatched
        pairs.append((m, chosen))
        spent += cost[m, chosen]
        cols_left.remove(chosen)
    return pairs


def match(out: HeadOutput, truths: Sequence[GroundTruthBox], weights: LossWeights, norm: BoxNorm) -> MatchResult:
    m = out.logits.shape[0]
    pairs = hungarian(cost_matrix(out, truths, weights, norm))
    taken = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(m) if i not in taken])


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float, gamma: float,
               background: int) -> torch.Tensor:
    """Softmax focal loss summed over rows; ``alpha`` weights object classes, ``1 - alpha`` background."""
    logp = F.log_softmax(logits, dim=-1).gather(-1, target[:, None]).squeeze(-1)
    p = logp.exp()
    alpha_t = torch.where(target == background, 1.0 - alpha, alpha).to(logits.dtype)
    return (-alpha_t * (1.0 - p) ** gamma * logp).sum()


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    box: torch.Tensor
    temp: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "box", "temp", "total")}


def compute_loss(final: HeadOutput, prev: HeadOutput | None, truths: Sequence[GroundTruthBox],
                 matched: MatchResult, weights: LossWeights, norm: BoxNorm) -> LossBreakdown:
    """Loss of one window. Every term is divided by ``max(1, #truths)``.

    - cls: focal loss over all queries (matched -> truth class, others -> background)
    - box: smooth-l1 on normalized centre/size plus the heading term, matched pairs only
    - temp: l1 between normalized matched centres at t and t - 1 (zero without a previous frame)
    """
    n_cls = final.logits.shape[-1] - 1
    dtype = final.logits.dtype
    gt = truths_tensor(truths, dtype)
    denom = float(max(1, len(truths)))
    target = torch.full((final.logits.shape[0],), n_cls, dtype=torch.long)
    zero = final.logits.new_zeros(())
    if matched.pairs:
        q_idx = torch.tensor([p for p, _ in matched.pairs], dtype=torch.long)
        t_idx = torch.tensor([t for _, t in matched.pairs], dtype=torch.long)
        target[q_idx] = gt[t_idx, 0].long()
    l_cls = focal_loss(final.logits, target, weights.alpha, weights.gamma, n_cls) / denom
    if matched.pairs:
        pb = final.boxes[q_idx]
        tb = gt[t_idx]
        diff = norm.normalize(pb[:, :4]) - norm.normalize(tb[:, 1:5])
        l_box = (smooth_l1(diff, weights.smooth_l1_beta).sum() + heading_term(pb[:, 4:6], tb[:, 5]).sum()) / denom
        if prev is not None:
            now = norm.normalize(pb[:, :4])[:, :2]
            before = norm.normalize(prev.boxes[q_idx][:, :4])[:, :2]
            l_temp = (now - before).abs().sum() / denom
        else:
            l_temp = zero
    else:
        l_box = zero
        l_temp = zero
    total = l_cls + weights.box * l_box + weights.temp * l_temp
    return LossBreakdown(l_cls, l_box, l_temp, total)
