import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radarfuse.backbone import (BackboneConfig, LocalStream, LocalStreamConfig, RadarBackbone, SasaBlock,
                                canonical_order, physics_knn, radar_backbone_forward)
from radarfuse.errors import ConfigError
from radarfuse.numerics import grad_check
from radarfuse.pir import PirEncoder, PirOutput

import oracles


def _randomize(module, seed, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _brute_knn(pts, k, lv, lr):
    out = []
    for i in range(len(pts)):
        d = []
        for j in range(len(pts)):
            if j != i:
                dd = sum((pts[i][c] - pts[j][c]) ** 2 for c in range(3))
                dd += lv * (pts[i][3] - pts[j][3]) ** 2 + lr * (pts[i][4] - pts[j][4]) ** 2
                d.append((dd, j))
        out.append([j for _, j in sorted(d)[:k]])
    return out


# ---------------------------------------------------------------- kNN


def test_knn_euclidean_reduction_on_line():
    pts = np.zeros((5, 5))
    pts[:, 0] = [0.0, 1.0, 3.0, 6.0, 10.0]
    pts[:, 3] = [5.0, -5.0, 0.0, 9.0, 1.0]  # ignored when lambda_v = 0
    nb = physics_knn(pts, 2, 0.0, 0.0)
    assert nb.tolist() == [[1, 2], [0, 2], [1, 0], [2, 4], [3, 2]]


def test_knn_clamps_to_other_points():
    nb = physics_knn(np.random.default_rng(0).normal(size=(2, 5)), 3, 1.0, 0.1)
    assert nb.tolist() == [[1], [0]]
    assert physics_knn(np.zeros((1, 5)), 4, 1.0, 1.0).shape == (1, 0)


def test_knn_ties_go_to_smaller_index():
    pts = np.zeros((4, 5))
    pts[:, 0] = [0.0, 1.0, -1.0, 1.0]
    assert physics_knn(pts, 2, 0.0, 0.0)[0].tolist() == [1, 2]


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 5)) * [5, 5, 1, 2, 3]
    lv, lr = rng.uniform(0, 3, 2)
    assert physics_knn(pts, 7, lv, lr).tolist() == _brute_knn(pts.tolist(), 7, lv, lr)


def test_local_config_validation():
    with pytest.raises(ConfigError) as err:
        LocalStreamConfig(k=0, lambda_v=-1.0).validate()
    assert set(err.value.fields) == {"k", "lambda_v"}


# ---------------------------------------------------------------- local stream


def _local(seed=0, c=3, widths=(4, 5)):
    return _randomize(LocalStream(c, widths, "gelu").double(), seed)


def test_local_stream_matches_scalar_oracle():
    ls = _local(1)
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 5))
    f = rng.normal(size=(6, 3))
    nb = physics_knn(a, 2, 1.0, 0.1)
    got = ls(torch.as_tensor(f), torch.as_tensor(a), torch.as_tensor(nb))
    ref = oracles.local_stream(ls, f.tolist(), a.tolist(), nb.tolist())
    assert np.max(np.abs(np.array(ref) - got.detach().numpy())) < 1e-12


def test_local_stream_singleton_self_edge():
    ls = _local(2)
    f = torch.randn(1, 3, dtype=torch.float64)
    a = torch.randn(1, 5, dtype=torch.float64)
    got = ls(f, a, torch.zeros(1, 0, dtype=torch.long))
    x = f
    for phi in ls.phi:
        x = phi(torch.cat([x, x, torch.zeros(1, 5, dtype=torch.float64)], -1))
    assert torch.equal(got, x)


def test_local_stream_identical_points_identical_outputs():
    ls = _randomize(LocalStream(3, (4, 5), "relu").double(), 3)
    f = torch.randn(1, 3, dtype=torch.float64).repeat(2, 1)
    a = torch.randn(1, 5, dtype=torch.float64).repeat(2, 1)
    out = ls(f, a, torch.tensor([[1], [0]]))
    assert torch.equal(out[0], out[1])


def test_local_stream_empty_frame():
    ls = _local(4)
    out = ls(torch.zeros(0, 3, dtype=torch.float64), torch.zeros(0, 5, dtype=torch.float64),
             torch.zeros(0, 0, dtype=torch.long))
    assert out.shape == (0, 5)


def test_local_stream_translation_leaves_deltas():
    ls = _local(5)
    rng = np.random.default_rng(5)
    a = rng.normal(size=(7, 5))
    f = torch.as_tensor(rng.normal(size=(7, 3)))
    nb = torch.as_tensor(physics_knn(a, 3, 1.0, 0.1))
    shifted = a.copy()
    shifted[:, :3] += [4.0, -2.0, 0.5]
    base = ls(f, torch.as_tensor(a), nb)
    moved = ls(f, torch.as_tensor(shifted), nb)
    assert torch.max(torch.abs(base - moved)).item() < 1e-12
    assert physics_knn(shifted, 3, 1.0, 0.1).tolist() == nb.tolist()


# ---------------------------------------------------------------- SASA


def _block(seed=0, c=4, **kw):
    return _randomize(SasaBlock(c, activation="gelu", **kw).double(), seed)


def test_sasa_weights_match_scalar_oracle():
    blk = _block(6)
    with torch.no_grad():
        blk.beta_raw.fill_(0.3)
    x = torch.randn(4, 4, dtype=torch.float64)
    pos = torch.randn(4, 3, dtype=torch.float64)
    xn = blk.ln1(x)
    got = blk.attention_weights(xn, pos)[0]
    ref = oracles.sasa_weights(blk, oracles.L(xn), pos.tolist())
    assert np.max(np.abs(np.array(ref) - got.detach().numpy())) < 1e-12
    out = blk(x, pos)
    assert np.max(np.abs(np.array(oracles.sasa_block(blk, x.tolist(), pos.tolist())) - out.detach().numpy())) < 1e-12


def test_sasa_beta_to_zero_reduces_to_plain_attention():
    blk = _block(7)
    plain = _block(7, decay=False)
    with torch.no_grad():
        blk.beta_raw.fill_(-40.0)
    x = torch.randn(5, 4, dtype=torch.float64)
    pos = torch.randn(5, 3, dtype=torch.float64) * 3
    assert torch.max(torch.abs(blk(x, pos) - plain(x, pos))).item() < 1e-6


def test_sasa_zero_distance_equals_plain_attention():
    blk = _block(8)
    plain = _block(8, decay=False)
    x = torch.randn(5, 4, dtype=torch.float64)
    pos = torch.ones(5, 3, dtype=torch.float64) * 2.5
    assert torch.equal(blk(x, pos), plain(x, pos))


def test_sasa_moving_a_point_away_lowers_attention_to_it():
    blk = _block(9)
    with torch.no_grad():
        blk.beta_raw.fill_(0.5)
    xn = torch.randn(4, 4, dtype=torch.float64)
    pos = torch.randn(4, 3, dtype=torch.float64)
    before = blk.attention_weights(xn, pos)[0]
    # a shift longer than twice the diameter makes every distance to point 2 grow
    far = pos.clone()
    far[2] += torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64) * 3.0 * torch.cdist(pos, pos).max()
    after = blk.attention_weights(xn, far)[0]
    for i in (0, 1, 3):
        assert after[i, 2] < before[i, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.floats(-5, 3), st.integers(0, 10_000))
def test_sasa_rows_sum_to_one(n, beta_raw, seed):
    blk = _block(10)
    with torch.no_grad():
        blk.beta_raw.fill_(beta_raw)
    g = torch.Generator().manual_seed(seed)
    w = blk.attention_weights(torch.randn(n, 4, generator=g, dtype=torch.float64),
                              torch.randn(n, 3, generator=g, dtype=torch.float64) * 4)
    assert torch.max(torch.abs(w.sum(-1) - 1)).item() < 1e-9
    assert (w >= 0).all()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_sasa_distance_monotone(beta, d1, extra):
    blk = _block(11)
    with torch.no_grad():
        blk.beta_raw.fill_(math.log(math.expm1(beta)))
    xn = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    pos = torch.zeros(3, 3, dtype=torch.float64)
    pos[1, 0] = d1
    pos[2, 1] = 1.0
    near = blk.attention_weights(xn, pos)[0, 0, 1]
    pos[1, 0] = d1 + extra
    assert blk.attention_weights(xn, pos)[0, 0, 1] < near


# ---------------------------------------------------------------- full backbone


def _radar(seed=0, activation="gelu", **cfg):
    torch.manual_seed(seed)
    conf = BackboneConfig(local=LocalStreamConfig(k=3, widths=(6, 6)), sasa_blocks=2, c_r=7, **cfg)
    bb = _randomize(RadarBackbone(6, conf, activation).double(), seed, 0.4)
    enc = _randomize(PirEncoder(3, 6, 8, activation).double(), seed + 1, 0.5)
    return enc, bb


def _frame(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 5)) * [6, 6, 1, 2, 2]
    a = torch.as_tensor(pts)
    return a, torch.as_tensor(physics_knn(pts, 3, 1.0, 0.1))


def test_backbone_empty_frame():
    enc, bb = _radar()
    a = torch.zeros(0, 5, dtype=torch.float64)
    out = bb(enc(a), a[:, :3], a, torch.zeros(0, 0, dtype=torch.long))
    assert out.tokens.shape == (0, 7) and len(out) == 0


def test_backbone_singleton_attends_to_itself():
    enc, bb = _radar(1)
    a, nb = _frame(1, 1)
    pir = enc(a)
    out = bb(pir, a[:, :3], a, nb)
    assert out.tokens.shape == (1, 7) and torch.isfinite(out.tokens).all()
    w = bb.blocks[0].attention_weights(bb.blocks[0].ln1(pir.f0_gated), a[:, :3])
    assert w.tolist() == [[[1.0]]]


@pytest.mark.parametrize("activation", ["relu", "gelu"])
@pytest.mark.parametrize("seed", range(4))
def test_backbone_permutation_equivariance_is_exact(activation, seed):
    enc, bb = _radar(seed, activation)
    a, nb = _frame(8 + 7 * seed, seed)
    pir = enc(a)
    base = bb(pir, a[:, :3], a, nb).tokens
    perm = torch.as_tensor(np.random.default_rng(seed + 100).permutation(len(a)))
    inv = torch.argsort(perm)
    moved_pir = PirOutput(pir.s[perm], pir.g[perm], pir.f0[perm], pir.f0_gated[perm])
    moved = radar_backbone_forward(moved_pir, a[perm, :3], a[perm], inv[nb[perm]], bb).tokens
    assert torch.equal(base[perm], moved)


def test_canonical_order_is_lexicographic():
    x = torch.tensor([[1.0, 2.0], [0.0, 5.0], [1.0, -1.0], [0.0, 5.0]])
    assert canonical_order(x).tolist() == [1, 3, 2, 0]


def test_batched_matches_single_frames():
    enc, bb = _radar(3)
    frames = [_frame(n, 10 + n) for n in (5, 1, 8)]
    n_max = 8
    attrs = torch.zeros(3, n_max, 5, dtype=torch.float64)
    nbr = torch.zeros(3, n_max, 3, dtype=torch.long)
    mask = torch.zeros(3, n_max, dtype=torch.bool)
    edge = torch.zeros(3, n_max, 3, dtype=torch.bool)
    for i, (a, nb) in enumerate(frames):
        n, k = nb.shape
        attrs[i, :n] = a
        mask[i, :n] = True
        if k:
            nbr[i, :n, :k], edge[i, :n, :k] = nb, True
        else:
            nbr[i, :n, 0], edge[i, :n, 0] = torch.arange(n), True
    out = bb(enc(attrs), attrs[..., :3], attrs, nbr, mask, edge)
    for i, (a, nb) in enumerate(frames):
        single = bb(enc(a), a[:, :3], a, nb).tokens
        assert torch.max(torch.abs(out.frame(i).tokens - single)).item() < 1e-12


def test_backbone_gradcheck_five_points():
    enc, bb = _radar(4)
    a, nb = _frame(5, 4)
    params = list(enc.named_parameters()) + list(bb.named_parameters())
    err = grad_check(lambda: bb(enc(a), a[:, :3], a, nb).tokens.sum(), params, eps=1e-4)
    assert err < 1e-3


def test_sasa_off_uses_local_stream_only():
    enc, bb = _radar(5, sasa_enabled=False)
    assert len(bb.blocks) == 0
    a, nb = _frame(6, 5)
    assert bb(enc(a), a[:, :3], a, nb).tokens.shape == (6, 7)
