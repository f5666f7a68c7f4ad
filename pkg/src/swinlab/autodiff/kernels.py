"""Raw numpy kernels for 3D convolution and its adjoints.

All public functions take and return channels-first arrays ``(N, C, H, W, D)``;
internally they work channels-last so the channel reduction is the contiguous
inner dimension of a BLAS matmul.

Two forward strategies exist:

* stride 1: every kernel offset is a constant shift in the flattened padded
  grid, so each tap is a matmul on a contiguous slice (no im2col copy). Rows
  that straddle the padding are computed and discarded.
* stride > 1: chunked im2col over output rows.

Reductions run in a fixed order, so results are bit-reproducible.
"""
from __future__ import annotations

from itertools import product

import numpy as np

# rows per matmul chunk in the flat path, and bytes per im2col chunk
_FLAT_CHUNK = 8192
_COL_BUDGET = 64 * 2**20


def out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(a) for a in v)
    return (int(v),) * 3


def check_conv_shapes(x_shape, w_shape, stride, padding) -> tuple:
    if len(x_shape) != 5:
        raise ValueError(f"conv3d expects (N, C, H, W, D) input, got shape {tuple(x_shape)}")
    if len(w_shape) != 5:
        raise ValueError(f"conv3d expects (Cout, Cin, kh, kw, kd) weight, got {tuple(w_shape)}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(
            f"channel mismatch: input {tuple(x_shape)} has {x_shape[1]} channels, "
            f"weight {tuple(w_shape)} expects {w_shape[1]}"
        )
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    ks = w_shape[2:]
    for n, k, pp in zip(x_shape[2:], ks, p):
        if k > n + 2 * pp:
            raise ValueError(
                f"kernel {tuple(ks)} larger than padded input {tuple(x_shape[2:])} "
                f"with padding {p}"
            )
    outs = tuple(out_extent(n, k, ss, pp) for n, k, ss, pp in zip(x_shape[2:], ks, s, p))
    return s, p, outs


def _to_cl_padded(x: np.ndarray, p) -> np.ndarray:
    """(N, C, H, W, D) -> zero-padded contiguous (N, H+2p, W+2p, D+2p, C)."""
    n, c, h, w, d = x.shape
    out = np.zeros((n, h + 2 * p[0], w + 2 * p[1], d + 2 * p[2], c), dtype=x.dtype)
    out[:, p[0] : p[0] + h, p[1] : p[1] + w, p[2] : p[2] + d, :] = x.transpose(0, 2, 3, 4, 1)
    return out


def _weight_taps(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, kh, kw, kd) -> (kh*kw*kd, Cin, Cout) contiguous."""
    cout, cin = w.shape[:2]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, cin, cout))


def _flat_offsets(ks, padded_shape) -> list:
    _, wp, dp = padded_shape
    return [a * wp * dp + b * dp + c for a, b, c in product(range(ks[0]), range(ks[1]), range(ks[2]))]


# ---------------------------------------------------------------------------
# stride-1 flat path
# ---------------------------------------------------------------------------
def _flat_forward(xp: np.ndarray, taps: np.ndarray, ks, outs) -> np.ndarray:
    """xp: (Hp, Wp, Dp, Cin) for one sample. Returns (Ho, Wo, Do, Cout)."""
    hp, wp, dp, cin = xp.shape
    cout = taps.shape[2]
    flat = xp.reshape(-1, cin)
    offs = _flat_offsets(ks, (hp, wp, dp))
    ho, wo, do = outs
    # last useful flat row + 1 (row q = h*wp*dp + w*dp + d)
    span = (ho - 1) * wp * dp + (wo - 1) * dp + do
    res = np.empty((ho * wp * dp, cout), dtype=xp.dtype)
    for q0 in range(0, span, _FLAT_CHUNK):
        q1 = min(span, q0 + _FLAT_CHUNK)
        acc = flat[q0 + offs[0] : q1 + offs[0]] @ taps[0]
        for t in range(1, len(offs)):
            acc += flat[q0 + offs[t] : q1 + offs[t]] @ taps[t]
        res[q0:q1] = acc
    return res.reshape(ho, wp, dp, cout)[:, :wo, :do]


def _flat_backward(xp, padded_shape, g_cl, taps, ks, need_x: bool, need_w: bool):
    """Gradients for one sample; g_cl: (Ho, Wo, Do, Cout). ``xp`` only needed for dW."""
    hp, wp, dp = padded_shape
    cin = taps.shape[1]
    ho, wo, do, cout = g_cl.shape
    offs = _flat_offsets(ks, (hp, wp, dp))
    gfull = np.zeros((ho, wp, dp, cout), dtype=g_cl.dtype)
    gfull[:, :wo, :do] = g_cl
    gflat = gfull.reshape(-1, cout)
    span = (ho - 1) * wp * dp + (wo - 1) * dp + do
    flat = xp.reshape(-1, cin) if need_w else None
    dx = np.zeros((hp * wp * dp, cin), dtype=g_cl.dtype) if need_x else None
    dtaps = np.zeros_like(taps) if need_w else None
    tapsT = np.ascontiguousarray(taps.transpose(0, 2, 1)) if need_x else None
    for q0 in range(0, span, _FLAT_CHUNK):
        q1 = min(span, q0 + _FLAT_CHUNK)
        gc = gflat[q0:q1]
        for t, off in enumerate(offs):
            if need_x:
                dx[q0 + off : q1 + off] += gc @ tapsT[t]
            if need_w:
                dtaps[t] += flat[q0 + off : q1 + off].T @ gc
    return (dx.reshape(hp, wp, dp, cin) if need_x else None), dtaps


# ---------------------------------------------------------------------------
# strided im2col path
# ---------------------------------------------------------------------------
def _rows_per_chunk(outs, ntaps, cin, itemsize) -> int:
    per_row = outs[1] * outs[2] * ntaps * cin * itemsize
    return max(1, _COL_BUDGET // max(per_row, 1))


def _im2col(xp, h0, h1, ks, s, outs) -> np.ndarray:
    """Columns for output rows [h0, h1): (rows*Wo*Do, taps*Cin)."""
    cin = xp.shape[-1]
    wo, do = outs[1], outs[2]
    cols = np.empty((h1 - h0, wo, do, ks[0], ks[1], ks[2], cin), dtype=xp.dtype)
    for a, b, c in product(range(ks[0]), range(ks[1]), range(ks[2])):
        cols[:, :, :, a, b, c, :] = xp[
            h0 * s[0] + a : (h1 - 1) * s[0] + a + 1 : s[0],
            b : b + s[1] * (wo - 1) + 1 : s[1],
            c : c + s[2] * (do - 1) + 1 : s[2],
        ]
    return cols.reshape((h1 - h0) * wo * do, -1)


def _col2im_add(dxp, dcols, h0, h1, ks, s, outs) -> None:
    cin = dxp.shape[-1]
    wo, do = outs[1], outs[2]
    dcols = dcols.reshape(h1 - h0, wo, do, ks[0], ks[1], ks[2], cin)
    for a, b, c in product(range(ks[0]), range(ks[1]), range(ks[2])):
        dxp[
            h0 * s[0] + a : (h1 - 1) * s[0] + a + 1 : s[0],
            b : b + s[1] * (wo - 1) + 1 : s[1],
            c : c + s[2] * (do - 1) + 1 : s[2],
        ] += dcols[:, :, :, a, b, c, :]


def _col_forward(xp, taps, ks, s, outs) -> np.ndarray:
    cin, cout = taps.shape[1], taps.shape[2]
    wmat = taps.reshape(-1, cout)
    res = np.empty(outs + (cout,), dtype=xp.dtype)
    step = _rows_per_chunk(outs, taps.shape[0], cin, xp.itemsize)
    for h0 in range(0, outs[0], step):
        h1 = min(outs[0], h0 + step)
        cols = _im2col(xp, h0, h1, ks, s, outs)
        res[h0:h1] = (cols @ wmat).reshape(h1 - h0, outs[1], outs[2], cout)
    return res


def _col_backward(xp, padded_shape, g_cl, taps, ks, s, need_x, need_w):
    outs = g_cl.shape[:3]
    cin, cout = taps.shape[1], taps.shape[2]
    wmat = taps.reshape(-1, cout)
    dxp = np.zeros(tuple(padded_shape) + (cin,), dtype=g_cl.dtype) if need_x else None
    dw = np.zeros_like(wmat) if need_w else None
    step = _rows_per_chunk(outs, taps.shape[0], cin, g_cl.itemsize)
    for h0 in range(0, outs[0], step):
        h1 = min(outs[0], h0 + step)
        gc = g_cl[h0:h1].reshape(-1, cout)
        if need_w:
            dw += _im2col(xp, h0, h1, ks, s, outs).T @ gc
        if need_x:
            _col2im_add(dxp, gc @ wmat.T, h0, h1, ks, s, outs)
    return dxp, (dw.reshape(taps.shape) if need_w else None)


# ---------------------------------------------------------------------------
# public kernels
# ---------------------------------------------------------------------------
def conv3d_forward(x, w, bias=None, stride=1, padding=0, method: str = "auto") -> np.ndarray:
    """Cross-correlation of ``x`` (N, Cin, H, W, D) with ``w`` (Cout, Cin, k, k, k)."""
    s, p, outs = check_conv_shapes(x.shape, w.shape, stride, padding)
    ks = w.shape[2:]
    taps = _weight_taps(w)
    use_flat = method == "flat" or (method == "auto" and s == (1, 1, 1))
    if use_flat and s != (1, 1, 1):
        raise ValueError("flat convolution path requires stride 1")
    n, cout = x.shape[0], w.shape[0]
    out = np.empty((n, cout) + outs, dtype=np.result_type(x, w))
    for i in range(n):
        xp = _to_cl_padded(x[i : i + 1], p)[0]
        r = _flat_forward(xp, taps, ks, outs) if use_flat else _col_forward(xp, taps, ks, s, outs)
        out[i] = r.transpose(3, 0, 1, 2)
        del xp, r
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward(x, w, g, stride=1, padding=0, need_x=True, need_w=True, method="auto", x_shape=None):
    """Gradients of a bias-free conv3d with respect to input and weight.

    ``x`` may be None when only the input gradient is wanted; pass ``x_shape``.
    """
    x_shape = tuple(x.shape) if x is not None else tuple(x_shape)
    if need_w and x is None:
        raise ValueError("weight gradient needs the forward input")
    s, p, outs = check_conv_shapes(x_shape, w.shape, stride, padding)
    if tuple(g.shape[2:]) != outs:
        raise ValueError(f"upstream gradient extent {g.shape[2:]} != conv output {outs}")
    ks = w.shape[2:]
    taps = _weight_taps(w)
    use_flat = method == "flat" or (method == "auto" and s == (1, 1, 1))
    h, wd, d = x_shape[2:]
    padded = (h + 2 * p[0], wd + 2 * p[1], d + 2 * p[2])
    dx = np.empty(x_shape, dtype=g.dtype) if need_x else None
    dtaps = np.zeros_like(taps) if need_w else None
    for i in range(x_shape[0]):
        xp = _to_cl_padded(x[i : i + 1], p)[0] if need_w else None
        g_cl = np.ascontiguousarray(g[i].transpose(1, 2, 3, 0))
        if use_flat:
            dxp, dt = _flat_backward(xp, padded, g_cl, taps, ks, need_x, need_w)
        else:
            dxp, dt = _col_backward(xp, padded, g_cl, taps, ks, s, need_x, need_w)
        del g_cl, xp
        if need_x:
            dx[i] = dxp[p[0] : p[0] + h, p[1] : p[1] + wd, p[2] : p[2] + d].transpose(3, 0, 1, 2)
            del dxp
        if need_w:
            dtaps += dt
    dw = None
    if need_w:
        cout, cin = w.shape[:2]
        dw = dtaps.reshape(tuple(ks) + (cin, cout)).transpose(4, 3, 0, 1, 2).copy()
    return dx, dw


def conv_transpose_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def conv_transpose3d_forward(x, w, bias=None, stride=2, padding=0) -> np.ndarray:
    """Adjoint of conv3d. ``w`` has layout (Cin, Cout, k, k, k).

    Interpreting ``w`` as a conv weight mapping Cout -> Cin channels, the
    result is that convolution's input gradient for upstream ``x``.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv_transpose3d expects 5-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"channel mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}"
        )
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    ks = w.shape[2:]
    outs = tuple(conv_transpose_extent(n, k, ss, pp) for n, k, ss, pp in zip(x.shape[2:], ks, s, p))
    if min(outs) < 1:
        raise ValueError(f"conv_transpose3d output extent {outs} is empty")
    shape = (x.shape[0], w.shape[1]) + outs
    dx, _ = conv3d_backward(None, w, x, stride=s, padding=p, need_x=True, need_w=False, x_shape=shape)
    if bias is not None:
        dx += bias.reshape(1, -1, 1, 1, 1)
    return dx
