"""Directional ablation grid: temporal history, PIR gate on clutter-heavy scenes, radar versus camera only."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError
from .pir import fit_norm_stats
from .scene_sim import CLUTTER, OUTLIER, SimConfig, generate_sequence
from .train import OptimConfig, RunConfig, build_windows, evaluate, gate_statistics, prepare_all, train

ALL_OFF = {"pir_enabled": False, "gate_enabled": False, "rifm_enabled": False, "tqa_enabled": False}
ALL_OFF_BACKBONE = {"sasa_enabled": False}


@dataclass(frozen=True)
class Variant:
    name: str
    benchmark: str  # "default" or "clutter"
    history: int
    toggles: dict = field(default_factory=dict)  # ModelConfig overrides
    backbone: dict = field(default_factory=dict)  # BackboneConfig overrides


VARIANTS = (
    Variant("full_T3", "default", 3),
    Variant("full_T1", "default", 1),
    Variant("image_only", "default", 1, ALL_OFF, ALL_OFF_BACKBONE),
    Variant("gate_on", "clutter", 1),
    Variant("gate_off", "clutter", 1, {"gate_enabled": False}),
)

# (better, worse) pairs; the first must not trail the second by more than the tolerance
COMPARISONS = {
    "temporal_T3_vs_T1": ("full_T3", "full_T1"),
    "gate_on_vs_off_clutter": ("gate_on", "gate_off"),
    "radar_image_vs_image_only": ("full_T3", "image_only"),
}


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    train_windows: int = 500
    eval_windows: int = 100
    episode_length: int = 10
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 8
    warmup: int = 50
    tolerance: float = 0.5  # AP points
    clutter: dict = field(default_factory=lambda: {"clutter_rate": 40.0, "outlier_rate": 4.0})
    variants: tuple[str, ...] = tuple(v.name for v in VARIANTS)

    def validate(self) -> None:
        bad = [k for k in ("train_windows", "eval_windows", "steps", "batch") if getattr(self, k) < 1]
        if self.episode_length < 3:
            bad.append("episode_length")
        unknown = sorted(set(self.variants) - {v.name for v in VARIANTS})
        if unknown:
            bad.append("variants")
        if not self.seeds:
            bad.append("seeds")
        if bad:
            raise ConfigError(f"invalid ablation config: {', '.join(bad)}", bad)


def benchmark_sim(cfg: AblationConfig, benchmark: str) -> SimConfig:
    base = SimConfig(episode_length=cfg.episode_length)
    if benchmark == "clutter":
        base = dataclasses.replace(base, **cfg.clutter)
    return base


def _frames_for(n_windows: int, episode_length: int, align: int) -> int:
    per_episode = episode_length - align + 1
    return episode_length * -(-n_windows // per_episode)


def make_split(cfg: AblationConfig, benchmark: str, seed: int, align: int = 3):
    """Seeded train/eval sequences; windows of every history end on the same frames."""
    sim = benchmark_sim(cfg, benchmark)
    out = {}
    for part, n, offset in (("train", cfg.train_windows, 1000), ("eval", cfg.eval_windows, 2000)):
        frames = _frames_for(n, cfg.episode_length, align)
        samples = generate_sequence(dataclasses.replace(sim, n_frames=frames), offset + seed)
        out[part] = samples
    return sim, out


def run_variant(cfg: AblationConfig, variant: Variant, seed: int, split) -> dict:
    sim, data = split
    history = variant.history
    align = max(v.history for v in VARIANTS)
    train_w = build_windows(len(data["train"]), cfg.episode_length, history, align)[: cfg.train_windows]
    eval_w = build_windows(len(data["eval"]), cfg.episode_length, history, align)[: cfg.eval_windows]
    run = RunConfig(sim=sim, history=history, seed=seed,
                    optim=OptimConfig(lr=cfg.lr, batch=cfg.batch, warmup=cfg.warmup, steps=cfg.steps,
                                      min_lr=cfg.lr * 1e-2))
    run.model = dataclasses.replace(run.model, **variant.toggles)
    run.model.backbone = dataclasses.replace(run.model.backbone, **variant.backbone)
    t0 = time.time()
    stats = fit_norm_stats(s.points for s in data["train"])
    result = train(run, data["train"], train_w, stats=stats)
    prepared = prepare_all(data["eval"], eval_w, stats, run.model, torch.float32)
    metrics = evaluate(result.model, prepared)
    gates = gate_statistics(result.model, prepared)
    by_source = {}
    for name, sel in (("target", gates["label"] >= 0), ("clutter", gates["label"] == CLUTTER),
                      ("outlier", gates["label"] == OUTLIER)):
        by_source[name] = float(gates["gate"][sel].mean()) if sel.any() else None
    return {"variant": variant.name, "seed": seed, "map50": metrics["map50"], "map50_95": metrics["map50_95"],
            "final_loss": result.log[-1]["total"], "mean_gate": by_source, "seconds": time.time() - t0}


def run_ablation(cfg: AblationConfig | None = None, on_result: Callable[[dict], None] | None = None) -> dict:
    """Train and evaluate every variant for every seed, then check the directional comparisons."""
    cfg = cfg or AblationConfig()
    cfg.validate()
    chosen = [v for v in VARIANTS if v.name in cfg.variants]
    runs = []
    for seed in cfg.seeds:
        splits = {}
        for v in chosen:
            if v.benchmark not in splits:
                splits[v.benchmark] = make_split(cfg, v.benchmark, seed)
            res = run_variant(cfg, v, seed, splits[v.benchmark])
            runs.append(res)
            if on_result:
                on_result(res)
    mean = {v.name: float(np.mean([r["map50"] for r in runs if r["variant"] == v.name])) for v in chosen}
    comparisons = {}
    for name, (better, worse) in COMPARISONS.items():
        if better in mean and worse in mean:
            diff = mean[better] - mean[worse]
            comparisons[name] = {"better": better, "worse": worse, "diff": diff, "pass": diff >= -cfg.tolerance}
    return {"runs": runs, "mean_map50": mean, "comparisons": comparisons, "tolerance": cfg.tolerance}
