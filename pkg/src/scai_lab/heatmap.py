"""Gaussian heatmap rendering, peak decoding and PCK.

Coordinates are (x, y) in pixel units with pixel centres at integers, so a
W x H map covers [0, W) x [0, H).
"""

import numpy as np


class DecodeFailure(ValueError):
    """Raised when a heatmap has no positive response to decode."""


def render_gaussian(c, sigma, shape):
    """Gaussian bump exp(-|p - c|^2 / (2 sigma^2)) on an (H, W) grid, scaled so
    the peak pixel is exactly 1 (a no-op when ``c`` sits on a pixel centre)."""
    h, w = shape
    x, y = float(c[0]), float(c[1])
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"coordinate ({x}, {y}) outside {w}x{h} heatmap")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gx = np.exp(-((np.arange(w) - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(h) - y) ** 2) / (2 * sigma * sigma))
    return np.outer(gy / gy.max(), gx / gx.max())


def render_batch(coords, sigma, shape, dtype=np.float32):
    """Render (..., 2) coordinates to peak-1 (..., H, W) heatmaps; out-of-frame
    points are clipped to the frame first."""
    h, w = shape
    coords = np.asarray(coords, dtype=np.float64)
    x = np.clip(coords[..., 0], 0, w - 1)[..., None]
    y = np.clip(coords[..., 1], 0, h - 1)[..., None]
    gx = np.exp(-((np.arange(w) - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(h) - y) ** 2) / (2 * sigma * sigma))
    gx /= gx.max(axis=-1, keepdims=True)
    gy /= gy.max(axis=-1, keepdims=True)
    maps = (gy[..., :, None] * gx[..., None, :]).astype(dtype)
    # far tails underflow to subnormals in float32; store them as exact zeros
    maps[maps < np.finfo(dtype).tiny] = 0
    return maps


def decode_peak(h):
    """Arg-max pixel with a quarter-pixel shift toward the larger axis neighbour.

    Returns ((x, y), confidence). Ties go to the lowest row-major index.
    """
    h = np.asarray(h)
    if h.size == 0:
        raise ValueError("empty heatmap")
    idx = int(np.argmax(h))
    conf = float(h.flat[idx])
    if not conf > 0:
        raise DecodeFailure("heatmap has no positive value")
    rows, cols = h.shape
    y, x = divmod(idx, cols)
    fx, fy = float(x), float(y)
    if 0 < x < cols - 1:
        fx += 0.25 * np.sign(h[y, x + 1] - h[y, x - 1])
    if 0 < y < rows - 1:
        fy += 0.25 * np.sign(h[y + 1, x] - h[y - 1, x])
    return (fx, fy), conf


def decode_batch(maps):
    """Vectorised :func:`decode_peak` over (..., H, W).

    Returns (coords (..., 2), confidence (...)); maps without a positive value
    decode to NaN coordinates with confidence 0.
    """
    maps = np.asarray(maps)
    lead = maps.shape[:-2]
    rows, cols = maps.shape[-2:]
    flat = maps.reshape(-1, rows * cols)
    idx = np.argmax(flat, axis=1)
    n = flat.shape[0]
    conf = flat[np.arange(n), idx].astype(np.float64)
    y, x = np.divmod(idx, cols)
    grid = maps.reshape(n, rows, cols)
    ar = np.arange(n)
    fx = x.astype(np.float64)
    fy = y.astype(np.float64)
    inx = (x > 0) & (x < cols - 1)
    iny = (y > 0) & (y < rows - 1)
    xr, xl = np.minimum(x + 1, cols - 1), np.maximum(x - 1, 0)
    yd, yu = np.minimum(y + 1, rows - 1), np.maximum(y - 1, 0)
    fx += np.where(inx, 0.25 * np.sign(grid[ar, y, xr] - grid[ar, y, xl]), 0.0)
    fy += np.where(iny, 0.25 * np.sign(grid[ar, yd, x] - grid[ar, yu, x]), 0.0)
    ok = conf > 0
    coords = np.stack([np.where(ok, fx, np.nan), np.where(ok, fy, np.nan)], axis=-1)
    return coords.reshape(lead + (2,)), np.where(ok, conf, 0.0).reshape(lead)


def pck(pred, gt, ref_len, tau=0.1, visible=None):
    """Fraction of visible keypoints with |pred - gt| <= tau * ref_len.

    ``pred``/``gt`` are (..., 2); ``ref_len`` broadcasts against the leading
    dims. Predictions that failed to decode (NaN) count as misses. Returns
    None when no keypoint is visible.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    if np.any(np.asarray(ref_len) <= 0):
        raise ValueError("ref_len must be positive")
    vis = np.ones(gt.shape[:-1], bool) if visible is None else np.asarray(visible, bool)
    if not vis.any():
        return None
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    hit = np.nan_to_num(dist, nan=np.inf) <= tau * np.asarray(ref_len, dtype=np.float64)
    return float(hit[vis].sum()) / float(vis.sum())
