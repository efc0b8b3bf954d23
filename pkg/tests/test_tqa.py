import dataclasses
import math

import numpy as np
import pytest
import torch

from radarfuse.backbone import BackboneConfig, LocalStreamConfig, RadarTokens
from radarfuse.errors import UsageError
from radarfuse.model import FusionDetector, ModelConfig, prepare_window, run_window
from radarfuse.numerics import DimensionError, GruCell
from radarfuse.pir import NormStats, fit_norm_stats
from radarfuse.scene_sim import EgoPose, SceneSample, SimConfig, generate_sequence
from radarfuse.tqa import DetectionHead, TemporalAggregator, detect, time_encoding, tqa_aggregate

import oracles


def _randomize(module, seed, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _agg(seed=0, ego=True, c=4, d=5):
    return _randomize(TemporalAggregator(c, d, ego, "gelu").double(), seed)


# ---------------------------------------------------------------- temporal aggregation


def test_time_encoding_matches_oracle():
    assert np.max(np.abs(time_encoding(5, 6).numpy() - np.array(oracles.time_encoding(5, 6)))) < 1e-15


def test_single_frame_window():
    agg = _agg(1, ego=False)
    q = torch.randn(1, 3, 4, dtype=torch.float64)
    q_bar = tqa_aggregate(q, agg)
    expected = agg.gru(q[0] + time_encoding(1, 4)[0], torch.zeros(3, 5, dtype=torch.float64))
    assert torch.equal(q_bar, expected)


def test_zero_gru_weights_keep_zero_state():
    agg = _agg(2)
    with torch.no_grad():
        for p in agg.gru.parameters():
            p.zero_()
    q_bar, states = agg(torch.randn(3, 2, 4, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64))
    assert torch.equal(q_bar, torch.zeros(2, 5, dtype=torch.float64))
    assert torch.equal(states, torch.zeros(3, 2, 5, dtype=torch.float64))


@pytest.mark.parametrize("ego", [False, True])
def test_unrolled_oracle(ego):
    agg = _agg(3, ego)
    q = torch.randn(3, 2, 4, dtype=torch.float64)
    deltas = torch.randn(3, 3, dtype=torch.float64) * 0.2
    q_bar, states = agg(q, deltas)
    ref = oracles.tqa(agg, q.tolist(), deltas.tolist())
    assert np.max(np.abs(np.array(ref) - states.detach().numpy())) < 1e-12
    assert torch.equal(q_bar, states[-1])


def test_dimension_errors():
    agg = _agg(4)
    with pytest.raises(DimensionError):
        agg(torch.zeros(2, 3, 5, dtype=torch.float64))
    with pytest.raises(DimensionError):
        agg(torch.zeros(0, 3, 4, dtype=torch.float64))


def test_gru_weights_shared_across_queries_and_time():
    grus = [m for m in _agg(5).modules() if isinstance(m, GruCell)]
    assert len(grus) == 1
    agg = _agg(5)
    q = torch.randn(3, 4, 4, dtype=torch.float64)
    d = torch.zeros(3, 3, dtype=torch.float64)
    full = agg(q, d)[0]
    # each query evolves on its own: running a query alone gives its row
    for m in range(4):
        alone = agg(q[:, m:m + 1], d)[0]
        assert torch.max(torch.abs(alone[0] - full[m])).item() < 1e-15


# ---------------------------------------------------------------- heads


def _head(seed=0):
    return _randomize(DetectionHead(5, 3, (0.0, 32.0), (-16.0, 16.0), 4.0, "gelu").double(), seed)


def test_head_matches_scalar_oracle():
    head = _head(6)
    q = torch.randn(4, 5, dtype=torch.float64)
    ref = torch.rand(4, 2, dtype=torch.float64) * 2 - 1
    out = head(q, ref)
    for m in range(4):
        logits, box = oracles.head(head, q[m].tolist(), ref[m].tolist())
        assert np.max(np.abs(np.array(logits) - out.logits[m].detach().numpy())) < 1e-12
        assert np.max(np.abs(np.array(box) - out.boxes[m].detach().numpy())) < 1e-12


def test_constant_head():
    head = _head(7)
    with torch.no_grad():
        for mlp in (head.cls, head.box):
            for layer in mlp.layers:
                layer.weight.zero_()
    dets = detect(torch.randn(3, 5, dtype=torch.float64), head)
    raw = head.box.layers[-1].bias
    expected = head.decode(raw[None])[0].tolist()
    for d in dets:
        assert [d.cx, d.cy, d.l, d.w, d.sin, d.cos] == expected
        assert d.logits.tolist() == head.cls.layers[-1].bias.tolist()


def test_sizes_positive_and_heading_unit():
    head = _head(8)
    raw = torch.randn(50, 6, dtype=torch.float64) * 30
    boxes = head.decode(raw)
    assert (boxes[:, 2:4] > 0).all()
    assert torch.max(torch.abs(boxes[:, 4] ** 2 + boxes[:, 5] ** 2 - 1)).item() < 1e-9


# ---------------------------------------------------------------- full window


def _model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(c_s=3, c=8, pir_hidden=8, activation="gelu",
                      backbone=BackboneConfig(local=LocalStreamConfig(k=3, widths=(8,)), sasa_blocks=1, c_r=8),
                      c_img=8, n_levels=2, image_size=64, n_queries=4, c_q=8, **kw)
    return FusionDetector(cfg).double().eval()


def _scene(n_frames=4, seed=0, **kw):
    return generate_sequence(SimConfig(n_frames=n_frames, **kw), seed)


def test_empty_window_is_usage_error():
    with pytest.raises(UsageError):
        run_window(_model(), [], NormStats.identity())


def test_single_frame_equals_direct_stage_calls():
    model = _model(1)
    seq = _scene(1, 1)
    stats = fit_norm_stats([s.points for s in seq])
    out = run_window(model, seq, stats)
    frame = prepare_window(seq, stats, model.config.backbone.local).frames[0]
    radar = model.encode_radar(frame)
    feats = model.image(frame.image)
    radar_ev = model.rifm.radar_evidence(radar)
    img_ev = model.rifm.image_evidence(feats.tokens, feats.pos, feats.ground_xy)
    q_tilde = model.rifm.fuse_queries(radar_ev.q, img_ev.q)
    q_bar = model.tqa(q_tilde[None], torch.zeros(1, 3, dtype=torch.float64))[0]
    final = model.head(q_bar, model.rifm.anchors(radar_ev, img_ev))
    assert torch.equal(out.q_tilde[0, 0], q_tilde)
    assert torch.equal(out.final.logits[0], final.logits)
    assert torch.equal(out.final.boxes[0], final.boxes)


def test_empty_middle_frame_completes():
    model = _model(2)
    seq = _scene(3, 2)
    seq[1] = dataclasses.replace(seq[1], points=np.zeros((0, 5)), labels=np.zeros(0, dtype=np.int64))
    out = run_window(model, seq, NormStats.identity())
    assert out.final.boxes.shape == (1, 4, 6) and torch.isfinite(out.final.boxes).all()
    assert len(out.radar_frame(0, 1)) == 0


def test_all_frames_empty():
    model = _model(3)
    seq = _scene(3, 3, n_targets=0, min_targets=0, clutter_rate=0.0)
    out = run_window(model, seq, NormStats.identity())
    assert torch.isfinite(out.final.logits).all()


def test_window_causality():
    model = _model(4)
    seq = _scene(5, 4)
    stats = fit_norm_stats([s.points for s in seq])
    before = run_window(model, seq[:3], stats)
    future = list(seq)
    future[3] = dataclasses.replace(seq[3], points=seq[3].points * 2.0 + 1.0, image=1.0 - seq[3].image)
    after = run_window(model, future[:3], stats)
    assert torch.equal(before.final.logits, after.final.logits)
    assert torch.equal(before.final.boxes, after.final.boxes)


def _world_transform(pose: EgoPose, phi: float, tx: float, ty: float) -> EgoPose:
    c, s = math.cos(phi), math.sin(phi)
    x, y = c * pose.tx - s * pose.ty + tx, s * pose.tx + c * pose.ty + ty
    theta = math.atan2(math.sin(pose.theta + phi), math.cos(pose.theta + phi))
    return EgoPose(theta, x, y, pose.t)


@pytest.mark.parametrize("phi,tx,ty", [(0.7, 120.0, -35.0), (-2.5, -4000.0, 900.0)])
def test_rigid_world_transform_leaves_outputs(phi, tx, ty):
    model = _model(5)
    seq = _scene(3, 5)
    moved = [dataclasses.replace(s, ego=_world_transform(s.ego, phi, tx, ty)) for s in seq]
    a = run_window(model, seq, NormStats.identity())
    b = run_window(model, moved, NormStats.identity())
    for x, y in ((a.final.logits, b.final.logits), (a.final.boxes, b.final.boxes), (a.q_tilde, b.q_tilde)):
        assert torch.max(torch.abs(x - y)).item() < 1e-9


def test_duplicated_last_frame_is_two_step_unroll():
    model = _model(6)
    seq = _scene(1, 6)
    stats = fit_norm_stats([s.points for s in seq])
    twice = [seq[0], dataclasses.replace(seq[0], t=seq[0].t + 1)]
    one = run_window(model, seq, stats)
    two = run_window(model, twice, stats)
    q = one.q_tilde[0, 0]
    assert torch.equal(two.q_tilde[0, 0], q) and torch.equal(two.q_tilde[1, 0], q)
    states = oracles.tqa(model.tqa, [oracles.L(q)] * 2, [[0.0] * 3] * 2)
    assert np.max(np.abs(np.array(states[1]) - two.hidden[1, 0].detach().numpy())) < 1e-12
    anchors = two.anchors[-1, 0]
    logits, _ = zip(*(oracles.head(model.head, states[1][m], oracles.L(anchors[m])) for m in range(4)))
    assert np.max(np.abs(np.array(logits) - two.final.logits[0].detach().numpy())) < 1e-12


def test_point_order_does_not_matter():
    model = _model(7)
    seq = _scene(2, 7)
    stats = fit_norm_stats([s.points for s in seq])
    rng = np.random.default_rng(0)
    shuffled = []
    for s in seq:
        perm = rng.permutation(len(s.points))
        shuffled.append(dataclasses.replace(s, points=s.points[perm], labels=s.labels[perm]))
    a, b = run_window(model, seq, stats), run_window(model, shuffled, stats)
    assert torch.equal(a.final.logits, b.final.logits) and torch.equal(a.final.boxes, b.final.boxes)


def test_tqa_off_uses_fused_queries():
    model = _model(8, tqa_enabled=False)
    out = run_window(model, _scene(2, 8), NormStats.identity())
    assert out.hidden is None
    assert torch.equal(out.final.logits, model.head(out.q_tilde[-1], out.anchors[-1]).logits)


def test_camera_only_skips_radar():
    model = _model(9, rifm_enabled=False)
    out = run_window(model, _scene(1, 9), NormStats.identity())
    assert out.radar is None and torch.isfinite(out.final.boxes).all()


def test_radar_tokens_type():
    model = _model(10)
    out = run_window(model, _scene(1, 10), NormStats.identity())
    assert isinstance(out.radar_frame(0, 0), RadarTokens)
