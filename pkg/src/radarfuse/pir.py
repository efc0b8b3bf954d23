"""Per-point radar encoding: attribute normalization, scattering prior, reliability gate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .numerics import Mlp

N_ATTR = 5


def signed_log(r):
    return np.sign(r) * np.log1p(np.abs(r))


@dataclass
class NormStats:
    """Dataset-level mean/scale of ``[x, y, z, v, signed_log(rcs)]``."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(N_ATTR), np.ones(N_ATTR))

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "scale": [float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def _raw_attributes(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, N_ATTR)
    out = pts.copy()
    out[:, 4] = signed_log(pts[:, 4])
    return out


def fit_norm_stats(frames: Iterable[np.ndarray], min_scale: float = 1e-6) -> NormStats:
    arrays = [np.asarray(f, dtype=np.float64).reshape(-1, N_ATTR) for f in frames]
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        return NormStats.identity()
    attrs = _raw_attributes(np.concatenate(arrays))
    return NormStats(attrs.mean(axis=0), np.maximum(attrs.std(axis=0), min_scale))


def normalize_frame(points, stats: NormStats) -> np.ndarray:
    """(N, 5) points (array or list of RadarPoint) to (N, 5) normalized attribute vectors."""
    scale = np.asarray(stats.scale, dtype=np.float64)
    mean = np.asarray(stats.mean, dtype=np.float64)
    if scale.shape != (N_ATTR,) or mean.shape != (N_ATTR,):
        raise ConfigError("NormStats mean/scale must have 5 entries", ["mean", "scale"])
    if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
        raise ConfigError("NormStats scales must be finite and positive", ["scale"])
    if not np.all(np.isfinite(mean)):
        raise ConfigError("NormStats means must be finite", ["mean"])
    pts = np.asarray([tuple(p) for p in points], dtype=np.float64) if not isinstance(points, np.ndarray) else points
    pts = pts.reshape(-1, N_ATTR)
    return (_raw_attributes(pts) - mean) / scale


@dataclass
class PirOutput:
    s: torch.Tensor  # (N, C_s) scattering prior; (N, 0) when the encoder is disabled
    g: torch.Tensor  # (N,) reliability in (0, 1)
    f0: torch.Tensor  # (N, C) embedding before gating
    f0_gated: torch.Tensor  # (N, C)


class PirEncoder(nn.Module):
    """Mapper ``s = MLP_map(a)``, gate ``g = sigmoid(MLP_gate([a; s]))``, embedding ``g * MLP_in([a; s])``.

    With ``pir_enabled=False`` the encoder falls back to an ungated ``MLP(a)`` embedding.
    With ``gate_enabled=False`` the prior is kept but g is fixed to 1.
    """

    def __init__(self, c_s: int = 8, c: int = 32, hidden: int = 32, activation: str = "relu",
                 pir_enabled: bool = True, gate_enabled: bool = True):
        super().__init__()
        if c_s < 1:
            raise ConfigError("scattering prior width must be >= 1", ["c_s"])
        self.c_s = c_s
        self.c = c
        self.pir_enabled = pir_enabled
        self.gate_enabled = gate_enabled and pir_enabled
        if pir_enabled:
            self.mapper = Mlp([N_ATTR, hidden, c_s], activation)
            self.gate = Mlp([N_ATTR + c_s, hidden, 1], activation)
            self.embed = Mlp([N_ATTR + c_s, hidden, c], activation)
        else:
            self.embed = Mlp([N_ATTR, hidden, c], activation)

    def forward(self, a: torch.Tensor) -> PirOutput:
        if not self.pir_enabled:
            f0 = self.embed(a)
            ones = a.new_ones(a.shape[:-1])
            return PirOutput(a.new_zeros(*a.shape[:-1], 0), ones, f0, f0)
        s = self.mapper(a)
        a_s = torch.cat([a, s], dim=-1)
        if self.gate_enabled:
            g = torch.sigmoid(self.gate(a_s)).squeeze(-1)
        else:
            g = a.new_ones(a.shape[:-1])
        f0 = self.embed(a_s)
        return PirOutput(s, g, f0, g[..., None] * f0)


def pir_forward(params: PirEncoder, attrs) -> PirOutput:
    a = attrs if isinstance(attrs, torch.Tensor) else torch.as_tensor(np.asarray(attrs), dtype=torch.float64)
    return params(a)
