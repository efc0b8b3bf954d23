"""Independent scalar-loop reference implementations used by the oracle tests.

Everything here works on Python floats and nested lists, reading weights out of the
torch modules but never calling their forward passes.
"""
from __future__ import annotations

import math


def L(t):
    return t.detach().double().tolist()


def affine(w, b, x):
    return [b[i] + sum(w[i][j] * x[j] for j in range(len(x))) for i in range(len(w))]


def relu(v):
    return [max(0.0, a) for a in v]


def gelu(v):
    c = math.sqrt(2.0 / math.pi)
    return [0.5 * a * (1.0 + math.tanh(c * (a + 0.044715 * a ** 3))) for a in v]


ACT = {"relu": relu, "gelu": gelu}


def sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


def softplus(a):
    return math.log1p(math.exp(-abs(a))) + max(a, 0.0)


def mlp(module, x):
    act = ACT[module.activation]
    n = len(module.layers)
    for i, layer in enumerate(module.layers):
        x = affine(L(layer.weight), L(layer.bias), x)
        if i < n - 1 or module.activate_last:
            x = act(x)
    return x


def layer_norm(x, gain, bias, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((a - mu) ** 2 for a in x) / len(x)
    s = math.sqrt(var + eps)
    return [(a - mu) / s * g + b for a, g, b in zip(x, gain, bias)]


def ln_module(ln, x):
    return layer_norm(x, L(ln.weight), L(ln.bias), ln.eps)


def softmax(v):
    m = max(v)
    e = [math.exp(a - m) for a in v]
    s = sum(e)
    return [a / s for a in e]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def gru(cell, x, h):
    wx, wh, b = L(cell.w_x), L(cell.w_h), L(cell.bias)
    d = len(h)
    z = [sigmoid(dot(wx[0][i], x) + dot(wh[0][i], h) + b[0][i]) for i in range(d)]
    r = [sigmoid(dot(wx[1][i], x) + dot(wh[1][i], h) + b[1][i]) for i in range(d)]
    rh = [r[i] * h[i] for i in range(d)]
    c = [math.tanh(dot(wx[2][i], x) + dot(wh[2][i], rh) + b[2][i]) for i in range(d)]
    return [z[i] * h[i] + (1 - z[i]) * c[i] for i in range(d)]


def pir(enc, a):
    """Returns (s, g, f0, f0_gated) for one attribute vector."""
    s = mlp(enc.mapper, a)
    a_s = list(a) + s
    g = sigmoid(mlp(enc.gate, a_s)[0])
    f0 = mlp(enc.embed, a_s)
    return s, g, f0, [g * v for v in f0]


def local_stream(ls, f, attrs, neighbors):
    """f: list of per-point features; neighbors: list of index lists (empty -> self-edge)."""
    n = len(f)
    for phi in ls.phi:
        out = []
        for i in range(n):
            nb = neighbors[i] if neighbors[i] else [i]
            best = None
            for j in nb:
                delta = [attrs[j][c] - attrs[i][c] for c in range(5)]
                e = mlp(phi, f[i] + f[j] + delta)
                best = e if best is None else [max(u, v) for u, v in zip(best, e)]
            out.append(best)
        f = out
    return f


def sasa_weights(block, xn, pos):
    """Single-head attention matrix of a SASA block on normalized tokens ``xn``."""
    wq, bq = L(block.q.weight), L(block.q.bias)
    wk, bk = L(block.k.weight), L(block.k.bias)
    beta = softplus(float(block.beta_raw.detach())) if block.decay else 0.0
    q = [affine(wq, bq, x) for x in xn]
    k = [affine(wk, bk, x) for x in xn]
    d = len(q[0])
    rows = []
    for i in range(len(xn)):
        logits = []
        for j in range(len(xn)):
            d2 = sum((pos[i][c] - pos[j][c]) ** 2 for c in range(3))
            logits.append(dot(q[i], k[j]) / math.sqrt(d) - beta * d2)
        rows.append(softmax(logits))
    return rows


def sasa_block(block, x, pos):
    xn = [ln_module(block.ln1, t) for t in x]
    a = sasa_weights(block, xn, pos)
    v = [affine(L(block.v.weight), L(block.v.bias), t) for t in xn]
    wo, bo = L(block.out.weight), L(block.out.bias)
    out = []
    for i in range(len(x)):
        mixed = [sum(a[i][j] * v[j][c] for j in range(len(x))) for c in range(len(v[0]))]
        y = [x[i][c] + o for c, o in enumerate(affine(wo, bo, mixed))]
        ff = mlp(block.ffn, ln_module(block.ln2, y))
        out.append([u + w for u, w in zip(y, ff)])
    return out


def cross_attention(ca, queries, tokens, key_bias=None, logit_bias=None):
    """Plain (unfolded) multi-head cross-attention; returns outputs and per-head weights."""
    h = ca.heads
    dh = ca.dim_out // h
    wq, bq = L(ca.q.weight), L(ca.q.bias)
    wk, bk = L(ca.k.weight), L(ca.k.bias)
    wv, bv = L(ca.v.weight), L(ca.v.bias)
    q = [affine(wq, bq, x) for x in queries]
    k = [affine(wk, bk, u) for u in tokens]
    if key_bias is not None:
        k = [[a + b for a, b in zip(kj, kb)] for kj, kb in zip(k, key_bias)]
    v = [affine(wv, bv, u) for u in tokens]
    outs, weights = [], []
    for m in range(len(queries)):
        row, wrow = [], []
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            logits = [dot(q[m][sl], k[j][sl]) / math.sqrt(dh) for j in range(len(tokens))]
            if logit_bias is not None:
                logits = [a + b for a, b in zip(logits, logit_bias[m])]
            w = softmax(logits)
            wrow.append(w)
            row += [sum(w[j] * v[j][c] for j in range(len(tokens))) for c in range(sl.start, sl.stop)]
        outs.append(row)
        weights.append(wrow)
    return outs, weights


def rifm(module, radar_tokens, radar_pos, img_tokens, img_pos, img_xy):
    """Returns (q_tilde rows, anchors) for one frame."""
    qn = [ln_module(module.ln_q, q) for q in L(module.queries)]
    ref = L(module.reference)
    gamma = softplus(float(module.gamma_raw.detach()))

    def locality(xy):
        return [[-gamma * ((p[0] - r[0]) ** 2 + (p[1] - r[1]) ** 2) for p in xy] for r in ref]

    u_img = [[a + b for a, b in zip(ln_module(module.ln_img, t), pe)] for t, pe in zip(img_tokens, img_pos)]
    q_img, w_img = cross_attention(module.img_attn, qn, u_img, logit_bias=locality(img_xy))
    xy_img = [[sum(sum(w[j] * img_xy[j][c] for j in range(len(img_xy))) for w in wm) / len(wm) for c in range(2)]
              for wm in w_img]
    if radar_tokens:
        mid, half = L(module.pos_mid), L(module.pos_half)
        pn = [[(p[c] - mid[c]) / half[c] for c in range(3)] for p in radar_pos]
        u_r = [ln_module(module.ln_r, t) for t in radar_tokens]
        kb = [mlp(module.radar_pos, p) for p in pn]
        q_r, w_r = cross_attention(module.radar_attn, qn, u_r, key_bias=kb, logit_bias=locality([p[:2] for p in pn]))
        xy_r = [[sum(sum(w[j] * pn[j][c] for j in range(len(pn))) for w in wm) / len(wm) for c in range(2)]
                for wm in w_r]
        mix = sigmoid(float(module.anchor_mix_raw.detach()))
        anchors = [[a + mix * (b - a) for a, b in zip(xi, xr)] for xi, xr in zip(xy_img, xy_r)]
    else:
        q_r = [[0.0] * module.c_q for _ in qn]
        anchors = xy_img
    fused = [mlp(module.fuse, a + b) for a, b in zip(q_r, q_img)]
    return fused, anchors


def head(module, q, ref=None):
    """Returns (logits, [cx, cy, l, w, sin, cos]) for one query state."""
    logits = mlp(module.cls, q)
    raw = mlp(module.box, q)
    (x0, x1), (y0, y1) = module.area_x, module.area_y
    ox = raw[0] + (ref[0] if ref is not None else 0.0)
    oy = raw[1] + (ref[1] if ref is not None else 0.0)
    cx = (x0 + x1) / 2 + (x1 - x0) / 2 * ox
    cy = (y0 + y1) / 2 + (y1 - y0) / 2 * oy
    size = [module.size_scale * softplus(v) for v in raw[2:4]]
    n = math.hypot(raw[4], raw[5])
    return logits, [cx, cy] + size + [raw[4] / n, raw[5] / n]


def time_encoding(length, dim):
    table = []
    for p in range(length):
        row = []
        for i in range(dim):
            k = i - (i % 2)
            angle = p / (10000.0 ** (k / dim))
            row.append(math.sin(angle) if i % 2 == 0 else math.cos(angle))
        table.append(row)
    return table


def tqa(agg, q_seq, deltas=None):
    """q_seq[t][m] feature lists; returns the per-step hidden states [t][m]."""
    steps = len(q_seq)
    pi = time_encoding(steps, agg.c_q)
    h = [[0.0] * agg.d_h for _ in q_seq[0]]
    states = []
    for t in range(steps):
        new = []
        for m, q in enumerate(q_seq[t]):
            x = [a + b for a, b in zip(q, pi[t])]
            if agg.ego_mlp is not None:
                d = deltas[t] if deltas is not None else [0.0, 0.0, 0.0]
                x = x + mlp(agg.ego_mlp, d)
            new.append(gru(agg.gru, x, h[m]))
        h = new
        states.append(h)
    return states
