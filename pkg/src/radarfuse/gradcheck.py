"""Finite-difference gradient checks on tiny float64 instances of the model components."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import BackboneConfig, LocalStreamConfig, RadarBackbone, physics_knn
from .model import FusionDetector, ModelConfig, PreparedFrame, PreparedWindow
from .numerics import grad_check_groups
from .pir import PirEncoder
from .scene_sim import GroundTruthBox
from .setpred import BoxNorm, LossWeights, compute_loss, match

LAYER_THRESHOLD = 1e-4
PIPELINE_THRESHOLD = 1e-3


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    threshold: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def as_dict(self) -> dict:
        return {"name": self.name, "max_rel_err": self.max_rel_err, "threshold": self.threshold,
                "pass": self.passed}


def micro_model_config() -> ModelConfig:
    """Smallest model that still exercises every stage; GELU keeps the objective smooth."""
    return ModelConfig(
        c_s=2, c=4, pir_hidden=4, activation="gelu",
        backbone=BackboneConfig(local=LocalStreamConfig(k=1, widths=(4,)), sasa_blocks=1, c_r=4),
        c_img=4, n_levels=1, image_size=8, n_queries=2, c_q=4, n_classes=2,
    )


def _micro_points(rng: np.random.Generator, n: int = 2) -> torch.Tensor:
    return torch.as_tensor(rng.normal(size=(n, 5)), dtype=torch.float64)


def _report(name, f, model, threshold, eps=1e-4, max_entries=None) -> GradReport:
    per = grad_check_groups(f, list(model.named_parameters()), eps=eps, max_entries=max_entries)
    return GradReport(name, max(per.values()), threshold, per)


def check_pir(seed: int = 0) -> GradReport:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    enc = PirEncoder(2, 4, 4, "gelu").double()
    a = _micro_points(rng, 3)
    w = torch.as_tensor(rng.normal(size=(3, 4)), dtype=torch.float64)
    return _report("pir", lambda: (enc(a).f0_gated * w).sum(), enc, LAYER_THRESHOLD)


def check_backbone(seed: int = 0) -> GradReport:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    pir = PirEncoder(2, 4, 4, "gelu").double()
    bb = RadarBackbone(4, BackboneConfig(local=LocalStreamConfig(k=1, widths=(4,)), sasa_blocks=1, c_r=4),
                       "gelu").double()
    a = _micro_points(rng, 2)
    nbr = torch.as_tensor(physics_knn(a.numpy(), 1, 1.0, 0.1))
    w = torch.as_tensor(rng.normal(size=(2, 4)), dtype=torch.float64)
    with torch.no_grad():
        pir_out = pir(a)

    def f():
        return (bb(pir_out, a[:, :3], a, nbr).tokens * w).sum()

    return _report("backbone", f, bb, LAYER_THRESHOLD)


def micro_window(rng: np.random.Generator, steps: int = 2, n_points: int = 2, image_size: int = 8) -> PreparedWindow:
    frames = []
    for _ in range(steps):
        a = _micro_points(rng, n_points)
        frames.append(PreparedFrame(
            a[:, :3].clone(), a, torch.as_tensor(physics_knn(a.numpy(), 1, 1.0, 0.1)),
            torch.as_tensor(rng.uniform(size=(image_size, image_size)), dtype=torch.float64),
            a[:, 4].numpy().copy(), np.zeros(n_points, dtype=int),
        ))
    deltas = torch.as_tensor(rng.normal(scale=0.1, size=(steps, 3)), dtype=torch.float64)
    deltas[0] = 0.0
    truths = [GroundTruthBox(0, 12.0, 3.0, 4.0, 2.0, 0.3), GroundTruthBox(1, 20.0, -4.0, 9.0, 3.0, -1.1)]
    return PreparedWindow(frames, deltas, truths[:1])


def check_pipeline(seed: int = 0, max_entries: int | None = None) -> GradReport:
    """Full forward plus set-prediction loss; the assignment is computed once and held fixed."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = FusionDetector(micro_model_config()).double()
    window = micro_window(rng)
    weights = LossWeights()
    norm = BoxNorm()
    with torch.no_grad():
        out = model([window])
    matched = match(out.final[0], window.truths, weights, norm)

    def f():
        o = model([window])
        prev = o.prev[0] if o.prev is not None else None
        return compute_loss(o.final[0], prev, window.truths, matched, weights, norm).total

    return _report("pipeline", f, model, PIPELINE_THRESHOLD, max_entries=max_entries)


def run_suite(seed: int = 0) -> list[GradReport]:
    return [check_pir(seed), check_backbone(seed), check_pipeline(seed)]
