"""Differentiable numpy building blocks.

Every operation is a ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` mapping upstream gradients to input/parameter
gradients. Layouts are channels-last: feature maps ``(H, W, C)``, row
batches ``(N, D)``. All functions follow the dtype of their inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------------------
# dense / conv primitives


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def fc_backward(dy: np.ndarray, w: np.ndarray, cache):
    x = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu_forward(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, x > 0


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H*W, 9*C) patches of the 1-padded input."""
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 pad-1 convolution; ``w`` is (3, 3, Cin, Cout)."""
    h, width, cin = x.shape
    cout = w.shape[3]
    cols = _im2col3(x)
    y = cols @ w.reshape(9 * cin, cout) + b
    return y.reshape(h, width, cout), (cols, x.shape)


def conv3x3_backward(dy: np.ndarray, w: np.ndarray, cache):
    cols, x_shape = cache
    h, width, cin = x_shape
    cout = w.shape[3]
    dy_flat = dy.reshape(h * width, cout)
    dw = (cols.T @ dy_flat).reshape(3, 3, cin, cout)
    db = dy_flat.sum(axis=0)
    # input gradient = full correlation with the flipped kernel
    w_back = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
    dx = (_im2col3(dy) @ w_back).reshape(h, width, cin)
    return dx, dw, db


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2; ties keep the first window position."""
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4, c)
    idx = win.argmax(axis=2)
    y = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, (idx, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    idx, (h, w, c) = cache
    dwin = np.zeros((h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[:, :, None, :], dy[:, :, None, :], axis=2)
    return dwin.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def instancenorm_forward(x: np.ndarray, eps: float = 1e-5):
    """Parameter-free per-channel standardization over spatial positions.

    Keeps batch-of-one SGD well conditioned; adds no learnable state, so
    checkpoints and the parameter dict are unaffected.
    """
    mu = x.mean(axis=(0, 1), keepdims=True)
    var = x.var(axis=(0, 1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat, (xhat, inv)


def instancenorm_backward(dy: np.ndarray, cache):
    xhat, inv = cache
    m = dy.mean(axis=(0, 1), keepdims=True)
    mh = (dy * xhat).mean(axis=(0, 1), keepdims=True)
    return inv * (dy - m - xhat * mh)


def l2norm_rows_forward(x: np.ndarray):
    """Unit-normalize rows; an exactly-zero row maps to e1 (gradient zero)
    so the unit-norm postcondition holds unconditionally."""
    n = np.sqrt((x * x).sum(axis=1))
    dead = n < 1e-12
    safe_n = np.where(dead, 1.0, n)
    y = x / safe_n[:, None]
    if dead.any():
        y[dead] = 0.0
        y[dead, 0] = 1.0
    return y, (y, safe_n, dead)


def l2norm_rows_backward(dy: np.ndarray, cache):
    y, n, dead = cache
    dx = (dy - y * (dy * y).sum(axis=1)[:, None]) / n[:, None]
    if dead.any():
        dx[dead] = 0.0
    return dx


# ---------------------------------------------------------------------------
# dropblock


def dropblock_forward(x: np.ndarray, drop_u: np.ndarray, p_drop: float, block: int = 2):
    """Zero square blocks on the spatial grid and rescale survivors.

    ``x`` is (N, G, G, C); candidate block positions tile the grid without
    overlap (each cell belongs to exactly one block, which keeps the
    rescaled expectation within ~1% of the input at the default rate);
    ``drop_u`` is (N, G//block, G//block) uniforms and a block drops when
    its uniform < ``p_drop``. The spatial mask is shared across channels;
    samples losing every cell produce all-zero output (no rescale blowup).
    """
    n, g, _, _ = x.shape
    tiles = g // block
    mask = np.ones((n, g, g), dtype=x.dtype)
    drops = drop_u < p_drop
    for i in range(tiles):
        for j in range(tiles):
            hit = drops[:, i, j]
            mask[hit, i * block : (i + 1) * block, j * block : (j + 1) * block] = 0.0
    surviving = mask.sum(axis=(1, 2))
    scale = np.where(surviving > 0, (g * g) / np.maximum(surviving, 1.0), 0.0).astype(x.dtype)
    m = mask * scale[:, None, None]
    return x * m[:, :, :, None], m


def dropblock_tiles(grid: int, block: int = 2) -> int:
    """Candidate block positions per axis for :func:`dropblock_forward`."""
    return grid // block


def dropblock_backward(dy: np.ndarray, cache):
    return dy * cache[:, :, :, None]


# ---------------------------------------------------------------------------
# RoI max pooling with optional rectangular masks


def _cell_windows(lo: np.ndarray, hi: np.ndarray, grid: int, limit: int):
    """Continuous spans [lo, hi] split into ``grid`` integer windows.

    Returns (i0, i1) arrays of shape (R, grid) with 0 <= i0 < i1 <= limit;
    degenerate cells collapse to the single nearest feature index.
    """
    g = np.arange(grid + 1, dtype=np.float64)
    bounds = lo[:, None] + (hi - lo)[:, None] * (g / grid)[None, :]
    i0 = np.floor(bounds[:, :-1]).astype(np.int64)
    i1 = np.ceil(bounds[:, 1:]).astype(np.int64)
    i0 = np.clip(i0, 0, limit - 1)
    i1 = np.clip(i1, 1, limit)
    degenerate = i1 <= i0
    if degenerate.any():
        mid = np.clip(
            np.floor(0.5 * (bounds[:, :-1] + bounds[:, 1:])).astype(np.int64), 0, limit - 1
        )
        i0 = np.where(degenerate, mid, i0)
        i1 = np.where(degenerate, mid + 1, i1)
    return i0, i1


def _span_tables(fmap: np.ndarray):
    """Range-max values and argmax positions for every contiguous row/col span.

    Returns (span_id, vals, ybest, xbest): ``span_id[a, b]`` indexes the
    span [a, b); ``vals[sy, sx, c]`` is the max of ``fmap`` over that
    rectangle, with ``xbest``/``ybest`` its position (ties to the lowest
    index).
    """
    h, w, c = fmap.shape
    n_spans_h = h * (h + 1) // 2
    n_spans_w = w * (w + 1) // 2
    span_id_h = np.full((h + 1, h + 1), -1, dtype=np.int64)
    span_id_w = np.full((w + 1, w + 1), -1, dtype=np.int64)

    # row stage: rmax[sy, x, c] = max over rows a..b of column x
    rmax = np.empty((n_spans_h, w, c), dtype=fmap.dtype)
    ybest = np.empty((n_spans_h, w, c), dtype=np.int16)
    k = 0
    for a in range(h):
        span_id_h[a, a + 1] = k
        rmax[k] = fmap[a]
        ybest[k] = a
        k += 1
    for length in range(2, h + 1):
        for a in range(h - length + 1):
            prev = span_id_h[a, a + length - 1]
            cur = k
            span_id_h[a, a + length] = cur
            row = fmap[a + length - 1]
            take = row > rmax[prev]
            rmax[cur] = np.where(take, row, rmax[prev])
            ybest[cur] = np.where(take, a + length - 1, ybest[prev])
            k += 1

    # column stage on the row maxima
    vals = np.empty((n_spans_h, n_spans_w, c), dtype=fmap.dtype)
    xbest = np.empty((n_spans_h, n_spans_w, c), dtype=np.int16)
    k = 0
    for a in range(w):
        span_id_w[a, a + 1] = k
        vals[:, k] = rmax[:, a]
        xbest[:, k] = a
        k += 1
    for length in range(2, w + 1):
        for a in range(w - length + 1):
            prev = span_id_w[a, a + length - 1]
            cur = k
            span_id_w[a, a + length] = cur
            col = rmax[:, a + length - 1]
            take = col > vals[:, prev]
            vals[:, cur] = np.where(take, col, vals[:, prev])
            xbest[:, cur] = np.where(take, a + length - 1, xbest[:, prev])
            k += 1

    return span_id_h, span_id_w, vals, ybest, xbest


def roi_pool_forward(
    fmap: np.ndarray,
    regions: np.ndarray,
    masks: np.ndarray | None,
    stride: float,
    grid: int = 4,
):
    """Masked grid max pooling of image-coordinate ``regions`` over ``fmap``.

    ``regions`` is (R, 4); ``masks`` is (R, 4) with NaN rows meaning "no
    mask". A grid cell whose image-space rectangle lies fully inside its
    region's mask rectangle pools to exactly 0.
    """
    h, w, c = fmap.shape
    regions = np.asarray(regions, dtype=np.float64)
    r = regions.shape[0]
    ix0, ix1 = _cell_windows(regions[:, 0] / stride, regions[:, 2] / stride, grid, w)
    iy0, iy1 = _cell_windows(regions[:, 1] / stride, regions[:, 3] / stride, grid, h)

    span_id_h, span_id_w, vals, ybest, xbest = _span_tables(fmap)
    sy = span_id_h[iy0, iy1]  # (R, grid)
    sx = span_id_w[ix0, ix1]
    syb = sy[:, :, None]  # broadcast rows x cols
    sxb = sx[:, None, :]
    pooled = vals[syb, sxb]  # (R, grid, grid, C)
    xb = xbest[syb, sxb]
    yb = ybest[sy[:, :, None, None], xb, np.arange(c)[None, None, None, :]]

    masked = np.zeros((r, grid, grid), dtype=bool)
    if masks is not None:
        has_mask = ~np.isnan(masks[:, 0])
        if has_mask.any():
            g = np.arange(grid + 1, dtype=np.float64) / grid
            cxb = regions[:, 0:1] + (regions[:, 2] - regions[:, 0])[:, None] * g[None, :]
            cyb = regions[:, 1:2] + (regions[:, 3] - regions[:, 1])[:, None] * g[None, :]
            eps = 1e-6 * max(h, w) * stride
            inside_x = (cxb[:, :-1] >= masks[:, 0:1] - eps) & (cxb[:, 1:] <= masks[:, 2:3] + eps)
            inside_y = (cyb[:, :-1] >= masks[:, 1:2] - eps) & (cyb[:, 1:] <= masks[:, 3:4] + eps)
            masked = inside_y[:, :, None] & inside_x[:, None, :]
            masked &= has_mask[:, None, None]
            pooled = np.where(masked[:, :, :, None], 0.0, pooled)

    cache = (yb, xb, masked, fmap.shape, fmap.dtype)
    return pooled.astype(fmap.dtype, copy=False), cache


def roi_pool_backward(dpooled: np.ndarray, cache):
    yb, xb, masked, (h, w, c), dtype = cache
    g = np.where(masked[:, :, :, None], 0.0, dpooled).astype(np.float64)
    flat = (yb.astype(np.int64) * w + xb.astype(np.int64)) * c + np.arange(c)[None, None, None, :]
    acc = np.bincount(flat.ravel(), weights=g.ravel(), minlength=h * w * c)
    return acc.reshape(h, w, c).astype(dtype, copy=False)
