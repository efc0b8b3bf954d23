"""Run configuration, training loop, prediction/evaluation and checkpoints."""
from __future__ import annotations

import base64
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, UsageError
from .metrics import evaluate_ap
from .model import FusionDetector, ModelConfig, PreparedWindow, prepare_window
from .pir import NormStats, fit_norm_stats
from .scene_sim import GroundTruthBox, SceneSample, SimConfig
from .setpred import BoxNorm, LossBreakdown, LossWeights, compute_loss, match

CHECKPOINT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch: int = 8
    warmup: int = 100
    min_lr: float = 1e-6
    steps: int = 1000
    max_grad_norm: float = 1.0

    def validate(self) -> None:
        bad = [k for k in ("lr", "batch", "steps") if not getattr(self, k) > 0]
        bad += [k for k in ("weight_decay", "warmup", "min_lr", "max_grad_norm") if not getattr(self, k) >= 0]
        if bad:
            raise ConfigError(f"invalid optimizer fields: {', '.join(bad)}", bad)


@dataclass
class AugmentConfig:
    flip: bool = False
    photometric: float = 0.0  # max brightness/contrast jitter
    point_noise: float = 0.0  # std of Gaussian position noise (m)
    point_dropout: float = 0.0  # probability of dropping each radar return


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    history: int = 3
    seed: int = 0
    dtype: str = "float32"
    cbgs: bool = False
    ema: bool = False
    mixed_precision: bool = False

    def validate(self) -> None:
        if self.history < 1:
            raise ConfigError("history T must be >= 1", ["history"])
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}", ["dtype"])
        reserved = [k for k in ("cbgs", "ema", "mixed_precision") if getattr(self, k)]
        if reserved:
            raise ConfigError(f"not implemented: {', '.join(reserved)}", reserved)
        self.sim.validate()
        self.model.validate()
        self.loss.validate()
        self.optim.validate()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}", unknown)

        def section(name, kind):
            raw = d.pop(name, None) or {}
            bad = sorted(set(raw) - {f.name for f in dataclasses.fields(kind)})
            if bad:
                raise ConfigError(f"unknown {name} fields: {', '.join(bad)}", bad)
            return kind(**raw)

        sim = SimConfig.from_dict(d.pop("sim", None) or {})
        model = ModelConfig.from_dict(d.pop("model", None) or {})
        return cls(sim=sim, model=model, loss=section("loss", LossWeights), optim=section("optim", OptimConfig),
                   augment=section("augment", AugmentConfig), **d)

    def box_norm(self) -> BoxNorm:
        return BoxNorm(tuple(self.model.area_x), tuple(self.model.area_y), self.model.size_scale)


def load_run_config(path) -> RunConfig:
    import yaml

    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of config sections")
    return RunConfig.from_dict(raw)


# ------------------------------------------------------------------ windows


def build_windows(n_frames: int, episode_length: int, history: int, align: int | None = None) -> list[list[int]]:
    """Index lists of ``history`` consecutive frames that stay inside one episode.

    Windows end on frames whose position in the episode is at least ``align - 1``
    (default ``history - 1``), so runs with different histories can share end frames.
    """
    align = max(align or history, history)
    ep = episode_length or n_frames
    out = []
    for end in range(n_frames):
        if end % ep >= align - 1:
            out.append(list(range(end - history + 1, end + 1)))
    return out


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr`` over ``cfg.steps``."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def augment_window(samples: Sequence[SceneSample], aug: AugmentConfig, rng: np.random.Generator,
                   area_y: tuple[float, float]) -> list[SceneSample]:
    flip = aug.flip and rng.random() < 0.5
    gain = 1.0 + rng.uniform(-aug.photometric, aug.photometric) if aug.photometric else 1.0
    offset = rng.uniform(-aug.photometric, aug.photometric) * 0.2 if aug.photometric else 0.0
    mid_y = area_y[0] + area_y[1]
    out = []
    for s in samples:
        pts = s.points.copy()
        img = s.image.copy()
        truths = list(s.truths)
        labels = s.labels.copy()
        if aug.point_dropout and len(pts):
            keep = rng.random(len(pts)) >= aug.point_dropout
            pts, labels = pts[keep], labels[keep]
        if aug.point_noise and len(pts):
            pts[:, :3] += rng.normal(0.0, aug.point_noise, (len(pts), 3))
        if flip:
            pts[:, 1] = mid_y - pts[:, 1]
            img = img[:, ::-1].copy()
            truths = [b._replace(cy=mid_y - b.cy, theta=-b.theta if b.theta != math.pi else math.pi)
                      for b in truths]
        if aug.photometric:
            img = np.clip(img * gain + offset, 0.0, 1.0)
        ego = s.ego._replace(theta=-s.ego.theta, ty=-s.ego.ty) if flip else s.ego
        out.append(SceneSample(s.t, pts, img, ego, truths, labels))
    return out


# ------------------------------------------------------------------ loss over a batch


def batch_loss(model: FusionDetector, windows: Sequence[PreparedWindow], weights: LossWeights,
               norm: BoxNorm) -> tuple[LossBreakdown, object]:
    out = model(windows)
    for name in ("logits", "boxes"):
        if not torch.isfinite(getattr(out.final, name)).all():
            raise NonFiniteError(f"output.{name}")
    parts = []
    for b, w in enumerate(windows):
        final = out.final[b]
        prev = out.prev[b] if out.prev is not None else None
        m = match(final, w.truths, weights, norm)
        parts.append(compute_loss(final, prev, w.truths, m, weights, norm))
    n = float(len(parts))
    agg = LossBreakdown(*(sum(getattr(p, k) for p in parts) / n for k in ("cls", "box", "temp", "total")))
    return agg, out


def first_non_finite(model: torch.nn.Module, losses: LossBreakdown | None = None) -> str | None:
    if losses is not None:
        for k in ("cls", "box", "temp", "total"):
            if not torch.isfinite(getattr(losses, k)).all():
                return f"loss.{k}"
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return f"param:{name}"
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return f"grad:{name}"
    return None


@dataclass
class TrainResult:
    model: FusionDetector
    stats: NormStats
    optimizer: torch.optim.Optimizer
    step: int
    log: list[dict]


def make_optimizer(model: FusionDetector, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(cfg: RunConfig, samples: Sequence[SceneSample], windows: Sequence[Sequence[int]],
          on_step: Callable[[dict], None] | None = None, stats: NormStats | None = None) -> TrainResult:
    """Train from scratch on the given windows (index lists into ``samples``)."""
    cfg.validate()
    if not windows:
        raise UsageError("no training windows")
    dtype = DTYPES[cfg.dtype]
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    stats = stats or fit_norm_stats(s.points for s in samples)
    model = FusionDetector(cfg.model).to(dtype)
    opt = make_optimizer(model, cfg.optim)
    norm = cfg.box_norm()
    local = cfg.model.backbone.local
    aug = cfg.augment
    augmenting = aug.flip or aug.photometric or aug.point_noise or aug.point_dropout
    cache = None if augmenting else [prepare_window([samples[i] for i in w], stats, local, dtype) for w in windows]
    order: list[int] = []
    log = []
    for step in range(cfg.optim.steps):
        if len(order) < cfg.optim.batch:
            order.extend(rng.permutation(len(windows)).tolist())
        idx, order = order[: cfg.optim.batch], order[cfg.optim.batch:]
        if cache is not None:
            batch = [cache[i] for i in idx]
        else:
            batch = [prepare_window(augment_window([samples[j] for j in windows[i]], aug, rng, cfg.model.area_y),
                                    stats, local, dtype) for i in idx]
        lr = lr_at(step, cfg.optim)
        for group in opt.param_groups:
            group["lr"] = lr
        try:
            losses, _ = batch_loss(model, batch, cfg.loss, norm)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite value at step {step}: {exc}") from None
        bad = first_non_finite(model, losses)
        if bad:
            raise NonFiniteError(f"non-finite value at step {step}: {bad}")
        opt.zero_grad()
        losses.total.backward()
        bad = first_non_finite(model)
        if bad:
            raise NonFiniteError(f"non-finite value at step {step}: {bad}")
        if cfg.optim.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.max_grad_norm)
        opt.step()
        entry = {"step": step, "lr": lr, **losses.as_floats()}
        log.append(entry)
        if on_step:
            on_step(entry)
    return TrainResult(model, stats, opt, cfg.optim.steps, log)


# ------------------------------------------------------------------ inference


def predict(model: FusionDetector, windows: Sequence[PreparedWindow], batch: int = 8):
    """Per window: a list of ``(class, score, (cx, cy, l, w, theta))``, one entry per query."""
    preds = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), batch):
            chunk = windows[start:start + batch]
            out = model(chunk)
            prob = torch.softmax(out.final.logits, dim=-1)[..., :-1]
            score, cls = prob.max(dim=-1)
            theta = out.final.theta
            boxes = out.final.boxes
            for b in range(len(chunk)):
                dets = []
                for m in range(boxes.shape[1]):
                    bx = boxes[b, m]
                    dets.append((int(cls[b, m]), float(score[b, m]),
                                 (float(bx[0]), float(bx[1]), float(bx[2]), float(bx[3]), float(theta[b, m]))))
                preds.append(dets)
    model.train()
    return preds


def evaluate(model: FusionDetector, windows: Sequence[PreparedWindow], batch: int = 8) -> dict:
    preds = predict(model, windows, batch)
    return evaluate_ap(preds, [w.truths for w in windows], model.config.n_classes)


def gate_statistics(model: FusionDetector, windows: Sequence[PreparedWindow]) -> dict[str, np.ndarray]:
    """Raw RCS, gate value and source label of every return in the newest frame of each window."""
    rcs, gates, labels = [], [], []
    with torch.no_grad():
        for w in windows:
            frame = w.frames[-1]
            rcs.append(frame.rcs)
            gates.append(model.pir(frame.attrs).g.double().numpy())
            labels.append(frame.labels)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return {"rcs": cat(rcs), "gate": cat(gates), "label": cat(labels).astype(int)}


def prepare_all(samples: Sequence[SceneSample], windows: Sequence[Sequence[int]], stats: NormStats,
                model_cfg: ModelConfig, dtype) -> list[PreparedWindow]:
    return [prepare_window([samples[i] for i in w], stats, model_cfg.backbone.local, dtype) for w in windows]


# ------------------------------------------------------------------ checkpoints


def _encode(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().contiguous().numpy()
    dt = arr.dtype.newbyteorder("<")
    return {"dtype": str(arr.dtype), "shape": list(arr.shape),
            "data": base64.b64encode(arr.astype(dt).tobytes()).decode("ascii")}


def _decode(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(d["dtype"]).newbyteorder("<")).reshape(d["shape"])
    return torch.from_numpy(arr.astype(np.dtype(d["dtype"])).copy())


def save_checkpoint(path, cfg: RunConfig, stats: NormStats, model: FusionDetector,
                    optimizer: torch.optim.Optimizer | None = None, step: int = 0) -> None:
    names = [n for n, _ in model.named_parameters()]
    opt_doc = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        state = {}
        for idx, st in sd["state"].items():
            state[names[idx]] = {k: (_encode(v) if isinstance(v, torch.Tensor) else v) for k, v in st.items()}
        groups = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
        opt_doc = {"state": state, "param_groups": json.loads(json.dumps(groups, default=str))}
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "norm_stats": stats.to_dict(),
        "step": int(step),
        "params": {n: _encode(p) for n, p in model.named_parameters()},
        "optimizer": opt_doc,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


@dataclass
class Checkpoint:
    config: RunConfig
    stats: NormStats
    model: FusionDetector
    optimizer: torch.optim.Optimizer
    step: int


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {doc.get('format_version')}", ["format_version"])
    cfg = RunConfig.from_dict(doc["config"])
    model = FusionDetector(cfg.model).to(DTYPES[cfg.dtype])
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(doc["params"]))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing)}", missing)
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(_decode(doc["params"][name]))
    opt = make_optimizer(model, cfg.optim)
    if doc.get("optimizer"):
        names = list(params)
        state = {}
        for name, st in doc["optimizer"]["state"].items():
            state[names.index(name)] = {k: (_decode(v) if isinstance(v, dict) else v) for k, v in st.items()}
        groups = doc["optimizer"]["param_groups"]
        for g in groups:
            g["params"] = list(range(len(names)))
        opt.load_state_dict({"state": state, "param_groups": groups})
    return Checkpoint(cfg, NormStats.from_dict(doc["norm_stats"]), model, opt, int(doc["step"]))
