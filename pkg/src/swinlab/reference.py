"""Independent numpy reference implementations used as test oracles.

Nothing here calls into the windowing or attention code under test; every
oracle works token by token on original grid coordinates.
"""
import itertools
import math

import numpy as np


def randomize(module, rng, scale=0.3):
    """Overwrite every parameter with N(0, scale^2) draws (zero biases make weak oracles)."""
    for _, p in module.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


_erf = np.vectorize(math.erf)


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def dense_attention(x, wqkv, bqkv, wproj, bproj, heads):
    """Full multi-head self-attention over all tokens of ``x`` (T, C)."""
    t, c = x.shape
    d = c // heads
    qkv = x @ wqkv + bqkv
    q, k, v = qkv[:, :c], qkv[:, c : 2 * c], qkv[:, 2 * c :]
    out = np.zeros((t, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(t):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(d) for j in range(t)])
            out[i, sl] = softmax(logits) @ v[:, sl]
    return out @ wproj + bproj


def shifted_block(block, x, shift=None):
    """Swin block computed by explicit region gathering.

    ``x`` is ``(B, H, W, D, C)``. Per axis the window is ``min(M, extent)``
    and the shift is ``shift`` (default ``block.shift_size``) only on axes
    longer than ``M``; pass ``M // 2`` to judge a block against the intended
    geometry rather than its own setting. Token
    ``x`` belongs to group ``floor((x - s) / m)`` per axis, which is exactly the
    set of tokens sharing its shifted window without wrapping around; tokens
    attend only within their group, and the relative position bias is indexed
    by the original coordinate difference.
    """
    p = {name: t.data.astype(np.float64) for name, t in block.named_parameters()}
    m_cfg = block.window_size
    heads = block.attn.num_heads
    b, *grid, c = x.shape
    d = c // heads
    window = [min(m_cfg, g) for g in grid]
    s_cfg = block.shift_size if shift is None else shift
    shift = [s_cfg if g > m_cfg else 0 for g in grid]
    span = 2 * m_cfg - 1
    coords = list(itertools.product(*(range(g) for g in grid)))
    key = {xyz: tuple((a - s) // m for a, s, m in zip(xyz, shift, window)) for xyz in coords}

    out = np.empty_like(x, dtype=np.float64)
    for bi in range(b):
        xb = x[bi].astype(np.float64)
        h = layer_norm(xb, p["norm1.weight"], p["norm1.bias"])
        qkv = h @ p["attn.qkv.weight"] + p["attn.qkv.bias"]
        q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
        att = np.zeros((*grid, c))
        for xi in coords:
            group = [xj for xj in coords if key[xj] == key[xi]]
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                logits = np.array([q[xi][sl] @ k[xj][sl] / math.sqrt(d) for xj in group])
                if "attn.relative_position_bias_table" in p:
                    table = p["attn.relative_position_bias_table"]
                    for n, xj in enumerate(group):
                        r = [a - bb + m_cfg - 1 for a, bb in zip(xi, xj)]
                        logits[n] += table[r[0] * span * span + r[1] * span + r[2], hd]
                att[xi][sl] = softmax(logits) @ np.array([v[xj][sl] for xj in group])
        y = xb + att @ p["attn.proj.weight"] + p["attn.proj.bias"]
        h2 = layer_norm(y, p["norm2.weight"], p["norm2.bias"])
        hid = gelu(h2 @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"])
        out[bi] = y + hid @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]
    return out


def directed_distances(a_pts, b_pts, spacing):
    """For each point of ``a_pts`` the distance to the nearest point of ``b_pts`` (exhaustive)."""
    a = np.asarray(a_pts, float) * spacing
    b = np.asarray(b_pts, float) * spacing
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)


def boundary_points(mask):
    """Foreground voxels with a background or out-of-volume six-neighbour, by explicit walk."""
    m = np.asarray(mask, bool)
    pts = []
    for idx in itertools.product(*(range(s) for s in m.shape)):
        if not m[idx]:
            continue
        for ax in range(3):
            hit = False
            for d in (-1, 1):
                nb = list(idx)
                nb[ax] += d
                if not 0 <= nb[ax] < m.shape[ax] or not m[tuple(nb)]:
                    hit = True
                    break
            if hit:
                pts.append(idx)
                break
    return pts


def hausdorff(pred, gt, spacing, percentile):
    """Symmetric percentile Hausdorff from exhaustive boundary pairs."""
    bp, bg = boundary_points(pred), boundary_points(gt)
    sp = np.asarray(spacing, float)
    return max(np.percentile(directed_distances(bp, bg, sp), percentile),
               np.percentile(directed_distances(bg, bp, sp), percentile))
