"""Command-line entry point: generate, train, eval, gradcheck, ablate, plot."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .errors import ConfigError, DatasetFormatError, UsageError
from .scene_sim import SimConfig, excess_kurtosis, generate_sequence, pooled_rcs, read_dataset, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

TOGGLE_FLAGS = {
    "no_pir": ("pir_enabled", None),
    "no_gate": ("gate_enabled", None),
    "no_tqa": ("tqa_enabled", None),
    "no_rifm": ("rifm_enabled", None),
    "no_sasa": (None, "sasa_enabled"),
}


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _run_config(args):
    from .train import RunConfig, load_run_config

    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "history", None) is not None:
        cfg.history = args.history
    for flag, (model_field, bb_field) in TOGGLE_FLAGS.items():
        if getattr(args, flag, False):
            if model_field:
                setattr(cfg.model, model_field, False)
            if bb_field:
                setattr(cfg.model.backbone, bb_field, False)
    for name in ("steps", "lr", "batch", "warmup"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.optim, name, value)
    cfg.validate()
    return cfg


def rcs_summary(samples) -> dict:
    clutter, target = pooled_rcs(samples)
    k_c = excess_kurtosis(clutter) if len(clutter) > 3 else None
    k_t = excess_kurtosis(target) if len(target) > 3 else None
    return {
        "n_frames": len(samples),
        "n_points": int(sum(len(s.points) for s in samples)),
        "n_truths": int(sum(len(s.truths) for s in samples)),
        "clutter_rcs_excess_kurtosis": k_c,
        "target_rcs_excess_kurtosis": k_t,
        "clutter_heavier_tailed": None if k_c is None or k_t is None else bool(k_c > k_t),
    }


# ------------------------------------------------------------------ subcommands


def cmd_generate(args) -> int:
    if args.config:
        sim = _run_config(args).sim
    else:
        sim = SimConfig()
    if args.frames is not None:
        sim = dataclasses.replace(sim, n_frames=args.frames)
    sim.validate()
    samples = generate_sequence(sim, args.seed if args.seed is not None else 0)
    write_dataset(samples, args.out, sim)
    _emit({"dataset": str(args.out), "stats": rcs_summary(samples)})
    return EXIT_OK


def _windows_for(cfg, samples, sim: SimConfig | None, limit: int | None):
    from .train import build_windows

    episode = sim.episode_length if sim else 0
    windows = build_windows(len(samples), episode, cfg.history)
    if limit:
        windows = windows[:limit]
    if not windows:
        raise UsageError(f"dataset of {len(samples)} frames has no window of {cfg.history} frames")
    return windows


def cmd_train(args) -> int:
    from .train import save_checkpoint, train

    cfg = _run_config(args)
    sim, samples = read_dataset(args.data)
    if sim is not None:
        cfg.sim = sim
    windows = _windows_for(cfg, samples, sim, args.windows)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    if args.threads:
        torch.set_num_threads(args.threads)
    with open(log_path, "w", encoding="utf-8") as log:
        result = train(cfg, samples, windows,
                       on_step=lambda e: log.write(json.dumps(e, sort_keys=True) + "\n"))
    save_checkpoint(args.out, cfg, result.stats, result.model, result.optimizer, result.step)
    first, last = result.log[0], result.log[-1]
    _emit({"checkpoint": str(args.out), "log": str(log_path), "windows": len(windows),
           "initial_loss": first, "final_loss": last})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint, prepare_all

    ckpt = load_checkpoint(args.checkpoint)
    sim, samples = read_dataset(args.data)
    cfg = ckpt.config
    windows = _windows_for(cfg, samples, sim, args.windows)
    prepared = prepare_all(samples, windows, ckpt.stats, cfg.model, next(ckpt.model.parameters()).dtype)
    _emit(evaluate(ckpt.model, prepared), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.seed or 0)
    _emit({"instances": [r.as_dict() for r in reports], "pass": all(r.passed for r in reports)}, args.out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .ablation import AblationConfig, run_ablation

    overrides = {}
    if args.config:
        import yaml

        overrides = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
    known = {f.name for f in dataclasses.fields(AblationConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown ablation fields: {', '.join(unknown)}", unknown)
    for key in ("seeds", "variants"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = AblationConfig(**overrides)
    report = run_ablation(cfg, on_result=lambda r: print(json.dumps(r, sort_keys=True), file=sys.stderr))
    _emit(report, args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plots

    if not (args.log or args.metrics or args.data):
        raise UsageError("plot needs at least one of --log, --metrics or --data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.log:
        written += plots.plot_training_log(plots.read_log(args.log), out)
    for path in args.metrics or []:
        written += plots.plot_metrics(json.loads(Path(path).read_text(encoding="utf-8")), out, Path(path).stem)
    if args.data:
        _, samples = read_dataset(args.data)
        written += plots.plot_rcs_histograms(samples, out)
        if args.checkpoint:
            written += plots.plot_gate_scatter(samples, args.checkpoint, out)
    _emit({"files": [str(p) for p in written]})
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarfuse", description="Radar-camera query fusion detector on synthetic water scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    def toggles(sp):
        for flag in TOGGLE_FLAGS:
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
        sp.add_argument("--history", type=int, help="window length T")

    g = sub.add_parser("generate", help="simulate a dataset")
    common(g, out_required=True)
    g.add_argument("--frames", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from scratch and write a checkpoint")
    common(t, out_required=True)
    toggles(t)
    t.add_argument("--data", required=True)
    t.add_argument("--log", help="JSONL step log (default: <out>.log.jsonl)")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--windows", type=int, help="use only the first N windows (overfit mode)")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out")
    e.add_argument("--windows", type=int)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="run the directional ablation grid")
    a.add_argument("--config", help="YAML overrides of the ablation settings")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--steps", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render plots from logs, metrics and datasets")
    pl.add_argument("--log", help="training JSONL log")
    pl.add_argument("--metrics", nargs="*", help="eval or ablation JSON reports")
    pl.add_argument("--data", help="dataset for RCS histograms")
    pl.add_argument("--checkpoint", help="with --data: gate-vs-RCS scatter from a forward pass")
    pl.add_argument("--out", required=True, help="output directory")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
