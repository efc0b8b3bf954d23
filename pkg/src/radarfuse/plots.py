"""Static matplotlib figures for training logs, metrics, RCS statistics and gate diagnostics."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import UsageError  # noqa: E402
from .scene_sim import pooled_rcs  # noqa: E402


def read_log(path) -> list[dict]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not rows:
        raise UsageError(f"{path}: empty training log")
    return rows


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_log(rows: list[dict], out: Path) -> list[Path]:
    steps = [r["step"] for r in rows]
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(steps, [max(r["total"], 1e-12) for r in rows])
    ax.set(xlabel="step", ylabel="total loss")
    written.append(_save(fig, out / "loss_total.png"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("cls", "box", "temp"):
        ax.semilogy(steps, [max(r[key], 1e-12) for r in rows], label=key)
    ax.set(xlabel="step", ylabel="loss term")
    ax.legend()
    written.append(_save(fig, out / "loss_terms.png"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [r["lr"] for r in rows])
    ax.set(xlabel="step", ylabel="learning rate")
    written.append(_save(fig, out / "learning_rate.png"))
    return written


def plot_metrics(report: dict, out: Path, stem: str) -> list[Path]:
    """Per-class AP bars for an eval report; mean mAP50 per variant and AP vs T for an ablation report."""
    written = []
    if "per_class_ap50" in report:
        names = [k for k, v in report["per_class_ap50"].items() if v is not None]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(names, [report["per_class_ap50"][k] for k in names])
        ax.set(ylabel="AP50 (%)", title=f"mAP50 {report['map50']:.1f}")
        written.append(_save(fig, out / f"{stem}_per_class_ap50.png"))
    if "mean_map50" in report:
        mean = report["mean_map50"]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(list(mean), list(mean.values()))
        ax.set(ylabel="mean mAP50 (%)")
        ax.tick_params(axis="x", rotation=30)
        written.append(_save(fig, out / f"{stem}_variants.png"))
        by_t = {t: mean[n] for t, n in ((1, "full_T1"), (3, "full_T3")) if n in mean}
        if by_t:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(list(by_t), list(by_t.values()), marker="o")
            ax.set(xlabel="history T", ylabel="mAP50 (%)")
            written.append(_save(fig, out / f"{stem}_ap_vs_T.png"))
    return written


def plot_rcs_histograms(samples, out: Path) -> list[Path]:
    clutter, target = pooled_rcs(samples)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    hi = max([np.percentile(x, 99.5) for x in (clutter, target) if len(x)] or [1.0])
    bins = np.linspace(0.0, hi, 60)
    for values, label in ((clutter, "clutter"), (target, "target")):
        if len(values):
            ax.hist(values, bins=bins, density=True, alpha=0.6, label=label)
    ax.set(xlabel="RCS", ylabel="density", yscale="log")
    ax.legend()
    return [_save(fig, out / "rcs_histograms.png")]


def plot_gate_scatter(samples, checkpoint_path, out: Path, max_windows: int = 200) -> list[Path]:
    from .train import build_windows, gate_statistics, load_checkpoint, prepare_all

    ckpt = load_checkpoint(checkpoint_path)
    windows = build_windows(len(samples), ckpt.config.sim.episode_length, 1)[:max_windows]
    prepared = prepare_all(samples, windows, ckpt.stats, ckpt.config.model, next(ckpt.model.parameters()).dtype)
    stats = gate_statistics(ckpt.model, prepared)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for sel, label in ((stats["label"] >= 0, "target"), (stats["label"] == -1, "clutter"), (stats["label"] == -2, "outlier")):
        if sel.any():
            ax.scatter(stats["rcs"][sel], stats["gate"][sel], s=4, alpha=0.5, label=label)
    ax.set(xlabel="RCS", ylabel="gate g", xscale="symlog")
    ax.legend()
    return [_save(fig, out / "gate_vs_rcs.png")]
