"""Brute-force float64 references for the fused primitives.

These are deliberately naive: explicit loops over every output element,
written directly from the operation definitions. They share no code with
:mod:`hsi_adapter.nn.functional` and exist so tests can compare the fast path
against an independent computation.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    og = Cout // groups
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(Cg):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - padding
                                q = j * stride + v - padding
                                if 0 <= r < H and 0 <= q < W:
                                    acc += x[n, g * Cg + c, r, q] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def conv_transpose2d(x, w, b=None, stride=2, padding=0):
    """Scatter form: every input pixel stamps its kernel into the output."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    B, Cin, H, W = x.shape
    _, Cout, kh, kw = w.shape
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    full = np.zeros((B, Cout, Hf, Wf))
    for n in range(B):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    for o in range(Cout):
                        for u in range(kh):
                            for v in range(kw):
                                full[n, o, i * stride + u, j * stride + v] += x[n, c, i, j] * w[c, o, u, v]
    out = full[:, :, padding : Hf - padding, padding : Wf - padding].copy()
    if b is not None:
        out += np.asarray(b, np.float64).reshape(1, -1, 1, 1)
    return out


def max_pool2d(x, kernel=3, stride=2, padding=1):
    x = np.asarray(x, np.float64)
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - kernel) // stride + 1
    Wo = (W + 2 * padding - kernel) // stride + 1
    out = np.full((B, C, Ho, Wo), -np.inf)
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    for u in range(kernel):
                        for v in range(kernel):
                            r = i * stride + u - padding
                            q = j * stride + v - padding
                            if 0 <= r < H and 0 <= q < W and x[n, c, r, q] > out[n, c, i, j]:
                                out[n, c, i, j] = x[n, c, r, q]
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    x = np.asarray(x, np.float64)
    out = np.empty_like(x)
    flat_in = x.reshape(-1, x.shape[-1])
    flat_out = out.reshape(-1, x.shape[-1])
    for t in range(flat_in.shape[0]):
        row = flat_in[t]
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        flat_out[t] = (row - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def softmax(x, axis=-1):
    x = np.ascontiguousarray(np.moveaxis(np.asarray(x, np.float64), axis, -1))
    out = np.empty_like(x)
    flat_in = x.reshape(-1, x.shape[-1])
    flat_out = out.reshape(-1, x.shape[-1])
    for t in range(flat_in.shape[0]):
        m = max(flat_in[t])
        e = [math.exp(v - m) for v in flat_in[t]]
        s = sum(e)
        flat_out[t] = [v / s for v in e]
    return np.moveaxis(out, -1, axis)


def multi_head_attention(q_in, kv_in, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Explicit per-query, per-key double loop for one batch element."""
    q_in = np.asarray(q_in, np.float64)
    kv_in = np.asarray(kv_in, np.float64)
    q = q_in @ np.asarray(wq, np.float64).T + bq
    k = kv_in @ np.asarray(wk, np.float64).T + bk
    v = kv_in @ np.asarray(wv, np.float64).T + bv
    Di = q.shape[-1]
    dh = Di // heads
    out = np.zeros((q.shape[0], Di))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            scores = [float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh) for j in range(k.shape[0])]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            tot = sum(e)
            for j in range(k.shape[0]):
                out[i, sl] += e[j] / tot * v[j, sl]
    return out @ np.asarray(wo, np.float64).T + bo


def bilinear_sample(value, x, y):
    """Sample ``value [C, H, W]`` at one normalized point; zero outside the grid."""
    value = np.asarray(value, np.float64)
    C, H, W = value.shape
    px = x * W - 0.5
    py = y * H - 0.5
    x0, y0 = math.floor(px), math.floor(py)
    out = np.zeros(C)
    for yi in (y0, y0 + 1):
        for xi in (x0, x0 + 1):
            if 0 <= yi < H and 0 <= xi < W:
                wgt = (1.0 - abs(px - xi)) * (1.0 - abs(py - yi))
                out += wgt * value[:, yi, xi]
    return out


def ms_deform_attn_core(value, levels, locations, weights):
    """Loop over batch, query, head, level and point.

    ``value [B, T_v, heads, d_head]``, ``locations [B, T_q, heads, L, P, 2]``,
    ``weights [B, T_q, heads, L, P]``; returns ``[B, T_q, heads * d_head]``.
    """
    value = np.asarray(value, np.float64)
    B, _, heads, dh = value.shape
    _, Tq, _, L, P, _ = locations.shape
    starts = [0]
    for h, w in levels:
        starts.append(starts[-1] + h * w)
    out = np.zeros((B, Tq, heads * dh))
    for n in range(B):
        for q in range(Tq):
            for m in range(heads):
                acc = np.zeros(dh)
                for lvl, (h, w) in enumerate(levels):
                    grid = value[n, starts[lvl] : starts[lvl + 1], m].T.reshape(dh, h, w)
                    for p in range(P):
                        x, y = locations[n, q, m, lvl, p]
                        acc += weights[n, q, m, lvl, p] * bilinear_sample(grid, x, y)
                out[n, q, m * dh : (m + 1) * dh] = acc
    return out


def ms_deform_attn(query, value_in, levels, ref_points, params, heads, points):
    """Full deformable attention built from the core loop and explicit projections."""
    query = np.asarray(query, np.float64)
    value_in = np.asarray(value_in, np.float64)
    p = {k: np.asarray(v, np.float64) for k, v in params.items()}
    B, Tq, D = query.shape
    L = len(levels)
    value = value_in @ p["value.weight"].T + p["value.bias"]
    value = value.reshape(B, value.shape[1], heads, -1)
    off = (query @ p["offsets.weight"].T + p["offsets.bias"]).reshape(B, Tq, heads, L, points, 2)
    logits = (query @ p["weights.weight"].T + p["weights.bias"]).reshape(B, Tq, heads, L * points)
    attn = softmax(logits, axis=-1).reshape(B, Tq, heads, L, points)
    ref = np.asarray(ref_points, np.float64)
    if ref.ndim == 3:
        ref = np.broadcast_to(ref, (B, *ref.shape))
    loc = np.empty_like(off)
    for lvl, (h, w) in enumerate(levels):
        loc[:, :, :, lvl, :, 0] = ref[:, :, None, lvl, None, 0] + off[:, :, :, lvl, :, 0] / w
        loc[:, :, :, lvl, :, 1] = ref[:, :, None, lvl, None, 1] + off[:, :, :, lvl, :, 1] / h
    core = ms_deform_attn_core(value, levels, loc, attn)
    return core @ p["out.weight"].T + p["out.bias"]


def cross_entropy(logits, labels, ignore_label=255):
    logits = np.asarray(logits, np.float64)
    B, C, H, W = logits.shape
    total, n = 0.0, 0
    for b in range(B):
        for i in range(H):
            for j in range(W):
                lab = int(labels[b, i, j])
                if lab == ignore_label:
                    continue
                z = logits[b, :, i, j]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[lab]
                n += 1
    return total / n if n else 0.0
