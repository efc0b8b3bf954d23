"""Seeded synthetic maritime scenes: moving targets, sea clutter, radar returns and top-down rasters."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DatasetFormatError, FormatVersionError

FORMAT_VERSION = 1

CLUTTER = -1
OUTLIER = -2


class RadarPoint(NamedTuple):
    x: float
    y: float
    z: float
    v: float
    rcs: float


class EgoPose(NamedTuple):
    """Sensor pose in the world frame: ``world = R(theta) @ p + (tx, ty)``."""

    theta: float
    tx: float
    ty: float
    t: int = 0


class GroundTruthBox(NamedTuple):
    cls: int
    cx: float
    cy: float
    l: float
    w: float
    theta: float


@dataclass(frozen=True)
class ClassSpec:
    name: str
    length: tuple[float, float]
    width: tuple[float, float]
    speed: tuple[float, float]
    rcs_log_mean: float
    points_mean: float
    height: tuple[float, float]
    brightness: float


CLASSES: tuple[ClassSpec, ...] = (
    ClassSpec("buoy", (2.0, 2.6), (2.0, 2.6), (0.0, 0.3), 1.0, 3.0, (0.0, 1.2), 0.95),
    ClassSpec("boat", (4.0, 5.5), (1.6, 2.2), (1.5, 4.0), 2.0, 6.0, (0.0, 1.5), 0.75),
    ClassSpec("ship", (8.0, 11.0), (2.8, 3.8), (0.8, 2.5), 3.0, 10.0, (0.0, 3.0), 0.6),
)
NUM_CLASSES = len(CLASSES)


@dataclass
class SimConfig:
    n_frames: int = 50
    episode_length: int = 0  # 0: one continuous world; otherwise the world is re-drawn every N frames
    min_targets: int = 1
    n_targets: int = 4
    clutter_rate: float = 12.0  # Poisson mean of clutter returns per frame
    outlier_rate: float = 0.0  # Poisson mean of extreme-RCS ghost returns per frame
    dropout: float = 0.15  # per-target probability of losing the whole cluster in a frame
    dt: float = 0.5
    area_x: tuple[float, float] = (0.0, 32.0)
    area_y: tuple[float, float] = (-16.0, 16.0)
    z_band: tuple[float, float] = (-0.5, 3.5)
    position_noise: float = 0.15
    doppler_noise: float = 0.1
    target_rcs_sigma: float = 0.3
    clutter_log_mean: float = 0.0
    clutter_log_sigma: float = 0.5
    pareto_fraction: float = 0.2
    pareto_alpha: float = 2.5
    pareto_scale: float = 2.0
    outlier_scale: float = 25.0
    image_size: int = 64
    background: float = 0.15
    speckle: float = 0.08
    fog_prob: float = 0.15  # per-frame probability of a low-contrast image
    fog_contrast: float = 0.2
    ego_speed: float = 1.0
    ego_yaw_rate: float = 0.03
    static_targets: bool = False

    def validate(self) -> None:
        bad = []
        if self.n_frames < 1:
            bad.append("n_frames")
        if self.episode_length < 0:
            bad.append("episode_length")
        if self.n_targets < 0:
            bad.append("n_targets")
        if not 0 <= self.min_targets <= max(self.n_targets, 0):
            bad.append("min_targets")
        for name in ("clutter_rate", "outlier_rate", "position_noise", "doppler_noise", "speckle",
                     "target_rcs_sigma", "clutter_log_sigma", "ego_speed", "ego_yaw_rate"):
            if not (getattr(self, name) >= 0 and math.isfinite(getattr(self, name))):
                bad.append(name)
        for name in ("dropout", "pareto_fraction", "fog_prob", "fog_contrast", "background"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad.append(name)
        if self.dt <= 0:
            bad.append("dt")
        if self.pareto_alpha <= 0:
            bad.append("pareto_alpha")
        if self.pareto_scale <= 0:
            bad.append("pareto_scale")
        if self.outlier_scale <= 0:
            bad.append("outlier_scale")
        for name in ("area_x", "area_y", "z_band"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                bad.append(name)
        if self.image_size < 8:
            bad.append("image_size")
        if bad:
            raise ConfigError(f"invalid simulator config fields: {', '.join(bad)}", bad)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown simulator config fields: {', '.join(unknown)}", unknown)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(eq=False)
class SceneSample:
    """One timestep. ``points`` is an (N, 5) array of ``x, y, z, v, rcs`` in the sensor frame.

    ``labels`` marks the source of each return: target index >= 0, ``CLUTTER`` or ``OUTLIER``.
    """

    t: int
    points: np.ndarray
    image: np.ndarray
    ego: EgoPose
    truths: list[GroundTruthBox]
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def radar_points(self) -> list[RadarPoint]:
        return [RadarPoint(*map(float, row)) for row in self.points]


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def relative_pose(from_pose: EgoPose, to_pose: EgoPose) -> tuple[float, float, float]:
    """``(dtheta, dx, dy)`` mapping from_pose sensor coordinates into to_pose sensor coordinates."""
    dtheta = from_pose.theta - to_pose.theta
    d = _rot(-to_pose.theta) @ np.array([from_pose.tx - to_pose.tx, from_pose.ty - to_pose.ty])
    return dtheta, float(d[0]), float(d[1])


def compensate_frame(points, from_pose: EgoPose, to_pose: EgoPose):
    """Express points recorded at ``from_pose`` in the sensor frame of ``to_pose``.

    Only coordinates move; Doppler and RCS are carried over unchanged. Accepts an
    (N, 5) array or a list of ``RadarPoint`` and returns the same kind.
    """
    as_list = not isinstance(points, np.ndarray)
    arr = np.asarray([tuple(p) for p in points], dtype=np.float64).reshape(-1, 5) if as_list else points
    out = arr.copy()
    if from_pose[:3] != to_pose[:3] and len(arr):
        dtheta, dx, dy = relative_pose(from_pose, to_pose)
        out[:, :2] = arr[:, :2] @ _rot(dtheta).T + np.array([dx, dy])
    if as_list:
        return [RadarPoint(*map(float, row)) for row in out]
    return out


def clutter_rcs_moments(config: SimConfig) -> tuple[float, float, float]:
    """Closed-form mean, variance and excess kurtosis of the clutter RCS mixture.

    Moments the Pareto tail does not have come back as ``inf``.
    """
    mu, sig = config.clutter_log_mean, config.clutter_log_sigma
    a, xm, p = config.pareto_alpha, config.pareto_scale, config.pareto_fraction

    def raw(k: int) -> float:
        lognormal = math.exp(k * mu + 0.5 * k * k * sig * sig)
        if p == 0:
            return lognormal
        pareto = a * xm**k / (a - k) if a > k else math.inf
        return (1 - p) * lognormal + p * pareto

    m1, m2, m3, m4 = (raw(k) for k in range(1, 5))
    var = m2 - m1**2
    if math.isinf(m4):
        return m1, var, math.inf
    c4 = m4 - 4 * m1 * m3 + 6 * m1**2 * m2 - 3 * m1**4
    return m1, var, c4 / var**2 - 3.0


def excess_kurtosis(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    m2 = np.mean(d**2)
    return float(np.mean(d**4) / m2**2 - 3.0)


def sample_clutter_rcs(rng: np.random.Generator, n: int, config: SimConfig) -> np.ndarray:
    lognormal = np.exp(rng.normal(config.clutter_log_mean, config.clutter_log_sigma, n))
    pareto = config.pareto_scale * (1.0 - rng.random(n)) ** (-1.0 / config.pareto_alpha)
    use_tail = rng.random(n) < config.pareto_fraction
    return np.where(use_tail, pareto, lognormal)


@dataclass
class _Target:
    cls: int
    x: float  # world frame
    y: float
    heading: float
    speed: float
    turn: float
    l: float
    w: float


class _World:
    def __init__(self, config: SimConfig, rng: np.random.Generator):
        c = config
        self.c = c
        self.rng = rng
        self.ego_theta = float(rng.uniform(-np.pi, np.pi))
        self.ego_xy = rng.uniform(-50.0, 50.0, 2)
        self.ego_yaw = float(rng.uniform(-c.ego_yaw_rate, c.ego_yaw_rate)) if c.ego_yaw_rate > 0 else 0.0
        count = int(rng.integers(c.min_targets, c.n_targets + 1)) if c.n_targets > 0 else 0
        margin = 3.0
        self.targets: list[_Target] = []
        for _ in range(count):
            k = int(rng.integers(NUM_CLASSES))
            spec = CLASSES[k]
            px = rng.uniform(c.area_x[0] + margin, c.area_x[1] - margin)
            py = rng.uniform(c.area_y[0] + margin, c.area_y[1] - margin)
            wx, wy = self.to_world(np.array([[px, py]]))[0]
            speed = 0.0 if c.static_targets else float(rng.uniform(*spec.speed))
            turn = 0.0 if c.static_targets else float(rng.uniform(-0.05, 0.05))
            length = float(rng.uniform(*spec.length))
            width = float(rng.uniform(*spec.width)) if k != 0 else length
            self.targets.append(_Target(k, float(wx), float(wy), float(rng.uniform(-np.pi, np.pi)),
                                        speed, turn, length, width))

    def pose(self, t: int) -> EgoPose:
        return EgoPose(wrap_angle(self.ego_theta), float(self.ego_xy[0]), float(self.ego_xy[1]), t)

    def to_world(self, p: np.ndarray) -> np.ndarray:
        return p @ _rot(self.ego_theta).T + self.ego_xy

    def to_ego(self, p: np.ndarray) -> np.ndarray:
        return (p - self.ego_xy) @ _rot(self.ego_theta)

    def ego_velocity(self) -> np.ndarray:
        return self.c.ego_speed * np.array([math.cos(self.ego_theta), math.sin(self.ego_theta)])

    def step(self) -> None:
        c = self.c
        self.ego_theta += self.ego_yaw * c.dt
        self.ego_xy = self.ego_xy + self.ego_velocity() * c.dt
        x0, x1 = c.area_x
        y0, y1 = c.area_y
        inner = 4.0
        centre = self.to_world(np.array([[(x0 + x1) / 2, (y0 + y1) / 2]]))[0]
        for tg in self.targets:
            if tg.speed == 0.0:
                continue
            tg.heading += tg.turn * c.dt
            ex, ey = self.to_ego(np.array([[tg.x, tg.y]]))[0]
            if not (x0 + inner < ex < x1 - inner and y0 + inner < ey < y1 - inner):
                want = math.atan2(centre[1] - tg.y, centre[0] - tg.x)
                diff = wrap_angle(want - tg.heading)
                tg.heading += float(np.clip(diff, -1.0 * c.dt, 1.0 * c.dt))
            tg.x += tg.speed * math.cos(tg.heading) * c.dt
            tg.y += tg.speed * math.sin(tg.heading) * c.dt


def _radial_doppler(p: np.ndarray, rel_vel_ego: np.ndarray) -> np.ndarray:
    rng_ = np.linalg.norm(p, axis=1)
    rng_ = np.where(rng_ > 1e-9, rng_, 1.0)
    return (p[:, 0] * rel_vel_ego[:, 0] + p[:, 1] * rel_vel_ego[:, 1]) / rng_


def _render(world: _World, boxes: list[tuple[int, float, float, float, float, float]],
            rng: np.random.Generator) -> np.ndarray:
    c = world.c
    n = c.image_size
    px = (c.area_x[1] - c.area_x[0]) / n
    py = (c.area_y[1] - c.area_y[0]) / n
    xs = c.area_x[0] + (np.arange(n) + 0.5) * px
    ys = c.area_y[0] + (np.arange(n) + 0.5) * py
    gx, gy = np.meshgrid(xs, ys, indexing="ij")  # rows run along x, columns along y
    contrast = c.fog_contrast if rng.random() < c.fog_prob else 1.0
    img = np.full((n, n), c.background)
    soft = 0.35
    for k, cx, cy, length, width, th in boxes:
        du = (gx - cx) * math.cos(th) + (gy - cy) * math.sin(th)
        dv = -(gx - cx) * math.sin(th) + (gy - cy) * math.cos(th)
        blob = 1.0 / (1.0 + np.exp(-(length / 2 - np.abs(du)) / soft))
        blob *= 1.0 / (1.0 + np.exp(-(width / 2 - np.abs(dv)) / soft))
        level = c.background + contrast * (CLASSES[k].brightness - c.background) * blob
        img = np.maximum(img, level)
    if c.speckle > 0:
        img = img + rng.normal(0.0, c.speckle, img.shape)
    return np.clip(img, 0.0, 1.0)


def _frame(world: _World, t: int, rng: np.random.Generator) -> SceneSample:
    c = world.c
    ego_vel = world.ego_velocity()
    to_ego_rot = _rot(world.ego_theta).T
    pts: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    truths: list[GroundTruthBox] = []
    boxes = []
    for idx, tg in enumerate(world.targets):
        cx, cy = world.to_ego(np.array([[tg.x, tg.y]]))[0]
        th = wrap_angle(tg.heading - world.ego_theta)
        boxes.append((tg.cls, float(cx), float(cy), tg.l, tg.w, th))
        inside = c.area_x[0] <= cx <= c.area_x[1] and c.area_y[0] <= cy <= c.area_y[1]
        if not inside:
            continue
        truths.append(GroundTruthBox(tg.cls, float(cx), float(cy), tg.l, tg.w, th))
        if rng.random() < c.dropout:
            continue
        spec = CLASSES[tg.cls]
        count = 1 + int(rng.poisson(spec.points_mean - 1.0))
        u = rng.uniform(-tg.l / 2, tg.l / 2, count)
        v = rng.uniform(-tg.w / 2, tg.w / 2, count)
        ct, st = math.cos(th), math.sin(th)
        x = cx + u * ct - v * st + rng.normal(0.0, c.position_noise, count) * (c.position_noise > 0)
        y = cy + u * st + v * ct + rng.normal(0.0, c.position_noise, count) * (c.position_noise > 0)
        z = np.clip(rng.uniform(*spec.height, count), *c.z_band)
        vel_world = tg.speed * np.array([math.cos(tg.heading), math.sin(tg.heading)])
        rel = np.tile(to_ego_rot @ (vel_world - ego_vel), (count, 1))
        p = np.stack([x, y, z], axis=1)
        dop = _radial_doppler(p, rel) + rng.normal(0.0, c.doppler_noise, count) * (c.doppler_noise > 0)
        rcs = np.exp(rng.normal(spec.rcs_log_mean, c.target_rcs_sigma, count))
        pts.append(np.column_stack([p, dop, rcs]))
        labels.append(np.full(count, idx))
    for rate, label in ((c.clutter_rate, CLUTTER), (c.outlier_rate, OUTLIER)):
        count = int(rng.poisson(rate)) if rate > 0 else 0
        if count == 0:
            continue
        x = c.area_x[0] + (c.area_x[1] - c.area_x[0]) * rng.random(count) ** 1.5
        y = rng.uniform(*c.area_y, count)
        z = np.clip(rng.normal(0.0, 0.15, count), *c.z_band)
        p = np.stack([x, y, z], axis=1)
        if label == CLUTTER:
            wave = rng.normal(0.0, 0.3, (count, 2))
            rcs = sample_clutter_rcs(rng, count, c)
        else:
            wave = rng.normal(0.0, 2.0, (count, 2))
            rcs = c.outlier_scale * c.pareto_scale * (1.0 - rng.random(count)) ** (-1.0 / c.pareto_alpha)
        rel = (wave - ego_vel) @ to_ego_rot.T
        dop = _radial_doppler(p, rel) + rng.normal(0.0, c.doppler_noise, count) * (c.doppler_noise > 0)
        pts.append(np.column_stack([p, dop, rcs]))
        labels.append(np.full(count, label))
    points = np.concatenate(pts) if pts else np.zeros((0, 5))
    lab = np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, dtype=np.int64)
    image = _render(world, boxes, rng)
    return SceneSample(t, points, image, world.pose(t), truths, lab)


def generate_sequence(config: SimConfig, seed: int) -> list[SceneSample]:
    """Generate ``config.n_frames`` consecutive samples; identical seeds give identical output."""
    config.validate()
    rng = np.random.default_rng(seed)
    world = _World(config, rng)
    out = []
    for t in range(config.n_frames):
        if t > 0:
            if config.episode_length and t % config.episode_length == 0:
                world = _World(config, rng)
            else:
                world.step()
        out.append(_frame(world, t, rng))
    return out


# ---------------------------------------------------------------- dataset files


def _sample_to_json(s: SceneSample) -> dict:
    return {
        "t": int(s.t),
        "points": np.asarray(s.points, dtype=np.float64).reshape(-1, 5).tolist(),
        "image": np.asarray(s.image, dtype=np.float64).ravel().tolist(),
        "image_shape": list(s.image.shape),
        "ego": {"theta": float(s.ego.theta), "tx": float(s.ego.tx), "ty": float(s.ego.ty)},
        "truths": [
            {"cls": int(b.cls), "cx": float(b.cx), "cy": float(b.cy), "l": float(b.l), "w": float(b.w),
             "theta": float(b.theta)}
            for b in s.truths
        ],
        "labels": np.asarray(s.labels, dtype=np.int64).tolist(),
    }


def _sample_from_json(d: dict, line: int) -> SceneSample:
    try:
        t = int(d["t"])
        points = np.asarray(d["points"], dtype=np.float64).reshape(-1, 5)
        shape = tuple(d.get("image_shape") or (int(math.isqrt(len(d["image"]))),) * 2)
        image = np.asarray(d["image"], dtype=np.float64).reshape(shape)
        ego = EgoPose(float(d["ego"]["theta"]), float(d["ego"]["tx"]), float(d["ego"]["ty"]), t)
        truths = [GroundTruthBox(int(b["cls"]), float(b["cx"]), float(b["cy"]), float(b["l"]), float(b["w"]),
                                 float(b["theta"])) for b in d["truths"]]
        labels = np.asarray(d.get("labels", [CLUTTER] * len(points)), dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed sample: {exc}", line) from exc
    if len(labels) != len(points):
        raise DatasetFormatError("labels and points differ in length", line)
    return SceneSample(t, points, image, ego, truths, labels)


def write_dataset(samples: Iterable[SceneSample], path, config: SimConfig | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "config": dataclasses.asdict(config) if config else {}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_json(s), sort_keys=True) + "\n")


def read_dataset(path) -> tuple[SimConfig | None, list[SceneSample]]:
    """Read a JSON Lines dataset; returns the echoed simulator config (if any) and the samples."""
    samples = []
    config = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", lineno) from exc
            if lineno == 1:
                if not isinstance(obj, dict) or "format_version" not in obj:
                    raise DatasetFormatError("missing header with format_version", lineno)
                if obj["format_version"] != FORMAT_VERSION:
                    raise FormatVersionError(
                        f"unsupported format_version {obj['format_version']} (expected {FORMAT_VERSION})", lineno)
                if obj.get("config"):
                    config = SimConfig.from_dict(obj["config"])
                continue
            if not isinstance(obj, dict):
                raise DatasetFormatError("sample line is not an object", lineno)
            samples.append(_sample_from_json(obj, lineno))
    return config, samples


def episode_starts(n_frames: int, episode_length: int) -> list[int]:
    step = episode_length or n_frames
    return list(range(0, n_frames, step))


def points_in_box(points: np.ndarray, box: GroundTruthBox, pad: float = 0.0) -> np.ndarray:
    """Boolean mask of points whose (x, y) fall inside the oriented box."""
    dx = points[:, 0] - box.cx
    dy = points[:, 1] - box.cy
    c, s = math.cos(box.theta), math.sin(box.theta)
    du = dx * c + dy * s
    dv = -dx * s + dy * c
    return (np.abs(du) <= box.l / 2 + pad) & (np.abs(dv) <= box.w / 2 + pad)


def pooled_rcs(samples: Sequence[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    """RCS of clutter returns and of target returns pooled over all frames."""
    if not samples:
        return np.zeros(0), np.zeros(0)
    rcs = np.concatenate([s.points[:, 4] for s in samples])
    lab = np.concatenate([s.labels for s in samples])
    return rcs[lab == CLUTTER], rcs[lab >= 0]
