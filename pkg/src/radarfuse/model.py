"""End-to-end window forward pass: compensation, radar/image encoding, query fusion, GRU, heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, LocalStreamConfig, RadarBackbone, RadarTokens, canonical_order, physics_knn
from .errors import ConfigError, UsageError
from .image_branch import ImageEncoder
from .pir import NormStats, PirEncoder, normalize_frame
from .rifm import Rifm
from .scene_sim import NUM_CLASSES, GroundTruthBox, SceneSample, compensate_frame, relative_pose
from .tqa import DetectionHead, HeadOutput, TemporalAggregator


@dataclass
class ModelConfig:
    c_s: int = 8
    c: int = 32
    pir_hidden: int = 32
    activation: str = "relu"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    c_img: int = 64
    n_levels: int = 3
    image_size: int = 64
    n_queries: int = 16
    c_q: int = 64
    heads: int = 1
    n_classes: int = NUM_CLASSES
    area_x: tuple[float, float] = (0.0, 32.0)
    area_y: tuple[float, float] = (-16.0, 16.0)
    size_scale: float = 4.0
    pir_enabled: bool = True
    gate_enabled: bool = True
    rifm_enabled: bool = True
    tqa_enabled: bool = True
    ego_embedding: bool = True

    def validate(self) -> None:
        bad = []
        for name in ("c_s", "c", "pir_hidden", "c_img", "n_levels", "n_queries", "c_q", "heads", "n_classes"):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.c_img % 4:
            bad.append("c_img")
        if self.c_q % self.heads:
            bad.append("heads")
        if self.size_scale <= 0:
            bad.append("size_scale")
        if bad:
            raise ConfigError(f"invalid model config fields: {', '.join(bad)}", bad)
        self.backbone.local.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = dict(d.pop("backbone", {}) or {})
        local = dict(bb.pop("local", {}) or {})
        if "widths" in local:
            local["widths"] = tuple(local["widths"])
        for key, src in (("model", d), ("backbone", bb), ("local", local)):
            target = {"model": cls, "backbone": BackboneConfig, "local": LocalStreamConfig}[key]
            unknown = sorted(set(src) - {f.name for f in dataclasses.fields(target)})
            if unknown:
                raise ConfigError(f"unknown {key} config fields: {', '.join(unknown)}", unknown)
        for k in ("area_x", "area_y"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(backbone=BackboneConfig(local=LocalStreamConfig(**local), **bb), **d)


@dataclass
class PreparedFrame:
    positions: torch.Tensor  # (N, 3) compensated
    attrs: torch.Tensor  # (N, 5) normalized compensated attributes
    neighbors: torch.Tensor  # (N, k) long
    image: torch.Tensor  # (H, W)
    rcs: np.ndarray  # raw RCS, kept for diagnostics
    labels: np.ndarray


@dataclass
class PreparedWindow:
    frames: list[PreparedFrame]
    ego_deltas: torch.Tensor  # (T, 3) pose change from the previous frame (zeros for the first)
    truths: list[GroundTruthBox]  # truths of the newest frame

    def __len__(self) -> int:
        return len(self.frames)


def prepare_window(samples: Sequence[SceneSample], stats: NormStats, local: LocalStreamConfig,
                   dtype=torch.float64) -> PreparedWindow:
    """Ego-compensate every frame into the newest frame, normalize, and build kNN graphs."""
    if len(samples) == 0:
        raise UsageError("a window needs at least one frame")
    to_pose = samples[-1].ego
    frames = []
    deltas = np.zeros((len(samples), 3))
    for i, s in enumerate(samples):
        comp = compensate_frame(np.asarray(s.points, dtype=np.float64).reshape(-1, 5), s.ego, to_pose)
        order = np.lexsort(comp.T[::-1])  # canonical point order, see canonical_order
        comp = comp[order]
        labels = np.asarray(s.labels)
        attrs = normalize_frame(comp, stats)
        metric_src = attrs if local.knn_normalized else comp
        nbr = physics_knn(metric_src, local.k, local.lambda_v, local.lambda_r)
        frames.append(PreparedFrame(
            torch.as_tensor(comp[:, :3], dtype=dtype),
            torch.as_tensor(attrs, dtype=dtype),
            torch.as_tensor(nbr, dtype=torch.long),
            torch.as_tensor(np.asarray(s.image), dtype=dtype),
            comp[:, 4].copy(),
            labels[order] if len(labels) == len(order) else labels.copy(),
        ))
        if i > 0:
            deltas[i] = relative_pose(samples[i - 1].ego, s.ego)
    return PreparedWindow(frames, torch.as_tensor(deltas, dtype=dtype), list(samples[-1].truths))


@dataclass
class WindowOutput:
    final: HeadOutput  # (B, M, ...) predictions at the newest frame
    prev: HeadOutput | None  # predictions at the frame before (for the temporal loss); None when T = 1
    q_tilde: torch.Tensor  # (T, B, M, C_q)
    hidden: torch.Tensor | None  # (T, B, M, D_h) GRU states; None when temporal aggregation is off
    radar: RadarTokens | None  # padded over all frames, window-major: row b * T + t; None without radar fusion
    anchors: torch.Tensor | None = None  # (T, B, M, 2) normalized attended positions the box centres offset from

    def radar_frame(self, window: int, step: int) -> RadarTokens:
        return self.radar.frame(window * self.q_tilde.shape[0] + step)


@dataclass
class RadarBatch:
    attrs: torch.Tensor  # (F, N, 5), zero padded
    positions: torch.Tensor  # (F, N, 3)
    neighbors: torch.Tensor  # (F, N, k)
    mask: torch.Tensor  # (F, N) real points
    edge_mask: torch.Tensor  # (F, N, k) real edges


def collate_frames(frames: Sequence[PreparedFrame]) -> RadarBatch:
    """Pad frames to a common point count; points without neighbours get a self-edge."""
    dtype = frames[0].attrs.dtype
    n_max = max(1, max(len(f.attrs) for f in frames))
    k_max = max(1, max(f.neighbors.shape[1] for f in frames))
    n_f = len(frames)
    attrs = torch.zeros(n_f, n_max, 5, dtype=dtype)
    pos = torch.zeros(n_f, n_max, 3, dtype=dtype)
    nbr = torch.zeros(n_f, n_max, k_max, dtype=torch.long)
    mask = torch.zeros(n_f, n_max, dtype=torch.bool)
    edge_mask = torch.zeros(n_f, n_max, k_max, dtype=torch.bool)
    for i, f in enumerate(frames):
        n, k = f.neighbors.shape
        attrs[i, :n] = f.attrs
        pos[i, :n] = f.positions
        mask[i, :n] = True
        if k == 0:
            nbr[i, :n, 0] = torch.arange(n)
            edge_mask[i, :n, 0] = True
        else:
            nbr[i, :n, :k] = f.neighbors
            edge_mask[i, :n, :k] = True
    return RadarBatch(attrs, pos, nbr, mask, edge_mask)


class FusionDetector(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        cfg.validate()
        self.config = cfg
        act = cfg.activation
        self.pir = PirEncoder(cfg.c_s, cfg.c, cfg.pir_hidden, act, cfg.pir_enabled, cfg.gate_enabled)
        self.backbone = RadarBackbone(cfg.c, cfg.backbone, act)
        self.image = ImageEncoder(cfg.c_img, cfg.n_levels, (cfg.image_size, cfg.image_size), act)
        self.rifm = Rifm(cfg.n_queries, cfg.c_q, cfg.backbone.c_r, cfg.c_img, cfg.heads, act,
                         cfg.area_x, cfg.area_y, radar_enabled=cfg.rifm_enabled)
        self.tqa = TemporalAggregator(cfg.c_q, cfg.c_q, cfg.ego_embedding, act) if cfg.tqa_enabled else None
        self.head = DetectionHead(cfg.c_q, cfg.n_classes, cfg.area_x, cfg.area_y, cfg.size_scale, act)

    @property
    def dtype(self) -> torch.dtype:
        return self.rifm.queries.dtype

    def encode_radar(self, frame: PreparedFrame) -> RadarTokens:
        """PIR plus backbone on one frame, evaluated in canonical point order."""
        attrs, pos, nbr = frame.attrs, frame.positions, frame.neighbors
        order = canonical_order(attrs)
        inv = torch.argsort(order)
        pir_out = self.pir(attrs[order])
        out = self.backbone(pir_out, pos[order], attrs[order], inv[nbr[order]] if nbr.numel() else nbr[order])
        return RadarTokens(out.tokens[inv], pos, pir_out.g[inv])

    def encode_radar_batch(self, batch: RadarBatch) -> RadarTokens:
        pir_out = self.pir(batch.attrs)
        return self.backbone(pir_out, batch.positions, batch.attrs, batch.neighbors, batch.mask, batch.edge_mask)

    def forward(self, windows: Sequence[PreparedWindow]) -> WindowOutput:
        if not windows:
            raise UsageError("no windows to run")
        steps = len(windows[0])
        if steps == 0 or any(len(w) != steps for w in windows):
            raise UsageError("all windows in a batch need the same, nonzero length")
        n_win = len(windows)
        images = torch.stack([f.image for w in windows for f in w.frames])
        tokens, pos = self.image.encode_batch(images)
        img_ev = self.rifm.image_evidence(tokens, pos, self.image.ground_xy.to(tokens.dtype))  # (B*T, M, .)
        if self.config.rifm_enabled:
            radar = self.encode_radar_batch(collate_frames([f for w in windows for f in w.frames]))
            radar_ev = self.rifm.radar_evidence(radar)
            anchors = self.rifm.anchors(radar_ev, img_ev)
            q_r = radar_ev.q
        else:
            radar = None  # camera-only: radar evidence is never computed, q_r = 0
            anchors = img_ev.xy
            q_r = torch.zeros_like(img_ev.q)
        q_img = img_ev.q
        q_tilde = self.rifm.fuse_queries(q_r, q_img)
        q_tilde = q_tilde.view(n_win, steps, *q_tilde.shape[1:]).transpose(0, 1)  # (T, B, M, C_q)
        anchors = anchors.view(n_win, steps, *anchors.shape[1:]).transpose(0, 1)  # (T, B, M, 2)
        if self.tqa is not None:
            deltas = torch.stack([w.ego_deltas for w in windows], dim=1)  # (T, B, 3)
            _, hidden = self.tqa(q_tilde, deltas)
            states = hidden
        else:
            hidden = None
            states = q_tilde
        final = self.head(states[-1], anchors[-1])
        prev = self.head(states[-2], anchors[-2]) if steps > 1 else None
        return WindowOutput(final, prev, q_tilde, hidden, radar, anchors)


def run_window(model: FusionDetector, samples: Sequence[SceneSample], stats: NormStats) -> WindowOutput:
    """Forward pass over one temporally ordered window of samples."""
    window = prepare_window(samples, stats, model.config.backbone.local, model.dtype)
    return model([window])
