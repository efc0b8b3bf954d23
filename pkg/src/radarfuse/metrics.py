"""Rotated-box IoU by convex polygon clipping, and COCO-style mean average precision."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .scene_sim import CLASSES, GroundTruthBox

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


class ValidationError(ValueError):
    pass


def box_corners(cx: float, cy: float, l: float, w: float, theta: float) -> np.ndarray:
    """(4, 2) corners in counter-clockwise order."""
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace formula; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        for j in range(len(inp)):
            cur = inp[j]
            nxt = inp[(j + 1) % len(inp)]
            sc, sn = side(cur), side(nxt)
            if sc >= 0:
                out.append(cur)
            if (sc >= 0) != (sn >= 0):
                t = sc / (sc - sn)
                out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def rotated_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two oriented boxes given as ``(cx, cy, l, w, theta)``."""
    pa = box_corners(*a)
    pb = box_corners(*b)
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    inter = max(0.0, polygon_area(clip_convex(pa, pb)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def _average_precision(tp: np.ndarray, n_truth: int) -> float:
    """101-point interpolated AP from a score-ordered TP flag sequence."""
    if n_truth == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_truth
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(recall) else 0.0
    return ap / 101.0


def evaluate_ap(predictions: Sequence[Sequence[tuple[int, float, Sequence[float]]]],
                truths: Sequence[Sequence[GroundTruthBox]], n_classes: int = len(CLASSES),
                thresholds: Sequence[float] = IOU_THRESHOLDS) -> dict:
    """mAP50 and mAP50:95 in percent.

    ``predictions[i]`` lists ``(class, score, (cx, cy, l, w, theta))`` for image i.
    Per-class AP is averaged over classes that have at least one truth.
    """
    if len(predictions) != len(truths):
        raise ValidationError(f"{len(predictions)} prediction lists for {len(truths)} images")
    for i, img_truths in enumerate(truths):
        for b in img_truths:
            if not (b.l > 0 and b.w > 0):
                raise ValidationError(f"image {i}: truth box has nonpositive size ({b.l}, {b.w})")
    ious = []
    for dets, gts in zip(predictions, truths):
        mat = np.zeros((len(dets), len(gts)))
        for a, (_, _, box) in enumerate(dets):
            for b, g in enumerate(gts):
                mat[a, b] = rotated_iou(box, (g.cx, g.cy, g.l, g.w, g.theta))
        ious.append(mat)

    ap = np.full((n_classes, len(thresholds)), np.nan)
    for c in range(n_classes):
        n_truth = sum(1 for gts in truths for g in gts if g.cls == c)
        cand = [(-float(score), i, a) for i, dets in enumerate(predictions)
                for a, (cls, score, _) in enumerate(dets) if cls == c]
        cand.sort()
        for ti, thr in enumerate(thresholds):
            used = [np.zeros(len(gts), dtype=bool) for gts in truths]
            tp = np.zeros(len(cand))
            for r, (_, i, a) in enumerate(cand):
                best, best_iou = -1, thr
                for b, g in enumerate(truths[i]):
                    if g.cls != c or used[i][b]:
                        continue
                    if ious[i][a, b] >= best_iou:
                        if best < 0 or ious[i][a, b] > ious[i][a, best]:
                            best = b
                            best_iou = ious[i][a, b]
                if best >= 0:
                    used[i][best] = True
                    tp[r] = 1.0
            ap[c, ti] = _average_precision(tp, n_truth)

    valid = ~np.isnan(ap[:, 0])
    if valid.any():
        map50 = float(np.mean(ap[valid, 0]))
        map50_95 = float(np.mean(ap[valid]))
    else:
        map50 = map50_95 = 0.0
    names = [CLASSES[c].name if c < len(CLASSES) else str(c) for c in range(n_classes)]
    return {
        "per_class_ap50": {names[c]: (None if np.isnan(ap[c, 0]) else 100.0 * float(ap[c, 0]))
                           for c in range(n_classes)},
        "map50": 100.0 * map50,
        "map50_95": 100.0 * map50_95,
        "n_images": len(truths),
        "n_truths": int(sum(len(g) for g in truths)),
    }
