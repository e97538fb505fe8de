"""Per-pixel and per-lattice-point kernels.

Each kernel has a numba ``@njit`` loop version and a vectorised numpy
version. The numba path is used when numba imports and the environment
variable ``RETINA_EIT_NO_NUMBA`` is unset (or ``0``). Both paths compute in
float64 and agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _numba_requested() -> bool:
    return os.environ.get("RETINA_EIT_NO_NUMBA", "0").lower() in ("", "0", "false", "no")


USE_NUMBA = numba is not None and _numba_requested()


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- bilinear sampling -------------------------------------------------------

def _sample_numba(img, ys, xs, clamp, fill):
    h, w, c = img.shape
    ho, wo = ys.shape
    out = np.empty((ho, wo, c), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            y = ys[i, j]
            x = xs[i, j]
            if clamp:
                y = min(max(y, 0.0), h - 1.0)
                x = min(max(x, 0.0), w - 1.0)
            elif y < -0.5 or y > h - 0.5 or x < -0.5 or x > w - 0.5:
                for k in range(c):
                    out[i, j, k] = fill
                continue
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            fy = y - y0
            fx = x - x0
            for k in range(c):
                acc = 0.0
                for dy in range(2):
                    yy = y0 + dy
                    wy = fy if dy == 1 else 1.0 - fy
                    for dx in range(2):
                        xx = x0 + dx
                        wx = fx if dx == 1 else 1.0 - fx
                        if 0 <= yy < h and 0 <= xx < w:
                            v = img[yy, xx, k]
                        else:
                            v = fill
                        acc += wy * wx * v
                out[i, j, k] = acc
    return out


_sample_numba_jit = _jit(_sample_numba)


def _sample_numpy(img, ys, xs, clamp, fill):
    h, w, c = img.shape
    if clamp:
        ys = np.clip(ys, 0.0, h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
        outside = np.zeros(ys.shape, dtype=bool)
    else:
        outside = (ys < -0.5) | (ys > h - 0.5) | (xs < -0.5) | (xs > w - 0.5)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + (c,), dtype=np.float64)
    for dy in range(2):
        yy = y0 + dy
        wy = fy if dy == 1 else 1.0 - fy
        for dx in range(2):
            xx = x0 + dx
            wx = fx if dx == 1 else 1.0 - fx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            v = np.where(valid[..., None], img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
            out += wy * wx * v
    out[outside] = fill
    return out


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, clamp: bool = True,
                    fill: float = 0.0, use_numba: bool | None = None) -> np.ndarray:
    """Sample ``img`` (H, W, C) at fractional pixel-centre coordinates.

    ``clamp`` extends edge pixels; otherwise points outside the image take
    ``fill`` and neighbours beyond the border contribute ``fill``.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    numba_path = USE_NUMBA if use_numba is None else (use_numba and numba is not None)
    fn = _sample_numba_jit if numba_path else _sample_numpy
    return fn(img, ys, xs, bool(clamp), float(fill))


# -- CLAHE -----------------------------------------------------------------

def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.floor(np.arange(tiles + 1) * n / tiles + 1e-9).astype(np.int64)


def _clahe_luts_numba(lum, ey, ex, clip_limit):
    ty = ey.shape[0] - 1
    tx = ex.shape[0] - 1
    luts = np.zeros((ty, tx, 256), dtype=np.float64)
    hist = np.zeros(256, dtype=np.int64)
    for a in range(ty):
        for b in range(tx):
            hist[:] = 0
            for y in range(ey[a], ey[a + 1]):
                for x in range(ex[b], ex[b + 1]):
                    hist[lum[y, x]] += 1
            total = (ey[a + 1] - ey[a]) * (ex[b + 1] - ex[b])
            if clip_limit > 0:
                limit = max(int(clip_limit * total / 256.0), 1)
                excess = 0
                for v in range(256):
                    if hist[v] > limit:
                        excess += hist[v] - limit
                        hist[v] = limit
                bonus = excess // 256
                residual = excess - bonus * 256
                for v in range(256):
                    hist[v] += bonus
                if residual > 0:
                    step = max(256 // residual, 1)
                    v = 0
                    while v < 256 and residual > 0:
                        hist[v] += 1
                        residual -= 1
                        v += step
            acc = 0
            scale = 255.0 / total
            for v in range(256):
                acc += hist[v]
                luts[a, b, v] = min(np.floor(acc * scale + 0.5), 255.0)
    return luts


_clahe_luts_numba_jit = _jit(_clahe_luts_numba)


def _clahe_luts_numpy(lum, ey, ex, clip_limit):
    ty, tx = len(ey) - 1, len(ex) - 1
    luts = np.zeros((ty, tx, 256), dtype=np.float64)
    for a in range(ty):
        for b in range(tx):
            tile = lum[ey[a]:ey[a + 1], ex[b]:ex[b + 1]]
            hist = np.bincount(tile.reshape(-1), minlength=256).astype(np.int64)
            total = tile.size
            if clip_limit > 0:
                limit = max(int(clip_limit * total / 256.0), 1)
                excess = int(np.maximum(hist - limit, 0).sum())
                hist = np.minimum(hist, limit)
                bonus, residual = divmod(excess, 256)
                hist += bonus
                if residual > 0:
                    step = max(256 // residual, 1)
                    hist[np.arange(0, 256, step)[:residual]] += 1
            cdf = np.cumsum(hist)
            luts[a, b] = np.minimum(np.floor(cdf * (255.0 / total) + 0.5), 255.0)
    return luts


def _clahe_apply_numba(lum, luts, ey, ex):
    h, w = lum.shape
    ty = luts.shape[0]
    tx = luts.shape[1]
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        cy = 0.0
        # fractional tile coordinate of the pixel centre relative to tile centres
        for a in range(ty):
            if y < ey[a + 1]:
                break
        centre_a = 0.5 * (ey[a] + ey[a + 1]) - 0.5
        size_a = ey[a + 1] - ey[a]
        cy = a + (y - centre_a) / size_a
        cy = min(max(cy, 0.0), ty - 1.0)
        a0 = int(np.floor(cy))
        a1 = min(a0 + 1, ty - 1)
        fy = cy - a0
        for x in range(w):
            for b in range(tx):
                if x < ex[b + 1]:
                    break
            centre_b = 0.5 * (ex[b] + ex[b + 1]) - 0.5
            size_b = ex[b + 1] - ex[b]
            cx = b + (x - centre_b) / size_b
            cx = min(max(cx, 0.0), tx - 1.0)
            b0 = int(np.floor(cx))
            b1 = min(b0 + 1, tx - 1)
            fx = cx - b0
            v = lum[y, x]
            top = (1.0 - fx) * luts[a0, b0, v] + fx * luts[a0, b1, v]
            bot = (1.0 - fx) * luts[a1, b0, v] + fx * luts[a1, b1, v]
            out[y, x] = (1.0 - fy) * top + fy * bot
    return out


_clahe_apply_numba_jit = _jit(_clahe_apply_numba)


def _tile_coord(n: int, edges: np.ndarray) -> np.ndarray:
    pos = np.arange(n)
    t = np.searchsorted(edges[1:], pos, side="right")
    centre = 0.5 * (edges[t] + edges[t + 1]) - 0.5
    size = edges[t + 1] - edges[t]
    return np.clip(t + (pos - centre) / size, 0.0, len(edges) - 2.0)


def _clahe_apply_numpy(lum, luts, ey, ex):
    ty, tx = luts.shape[:2]
    cy = _tile_coord(lum.shape[0], ey)
    cx = _tile_coord(lum.shape[1], ex)
    a0 = np.floor(cy).astype(np.int64)
    b0 = np.floor(cx).astype(np.int64)
    a1 = np.minimum(a0 + 1, ty - 1)
    b1 = np.minimum(b0 + 1, tx - 1)
    fy = (cy - a0)[:, None]
    fx = (cx - b0)[None, :]
    A0, B0 = a0[:, None], b0[None, :]
    A1, B1 = a1[:, None], b1[None, :]
    top = (1.0 - fx) * luts[A0, B0, lum] + fx * luts[A0, B1, lum]
    bot = (1.0 - fx) * luts[A1, B0, lum] + fx * luts[A1, B1, lum]
    return (1.0 - fy) * top + fy * bot


def clahe_luminance(lum: np.ndarray, grid: tuple[int, int], clip_limit: float,
                    use_numba: bool | None = None) -> np.ndarray:
    """Equalise an 8-bit single-channel image; returns float64 values in [0, 255].

    ``clip_limit <= 0`` or ``inf`` disables clipping.
    """
    lum = np.ascontiguousarray(lum, dtype=np.int64)
    ey = _tile_edges(lum.shape[0], grid[0])
    ex = _tile_edges(lum.shape[1], grid[1])
    clip = 0.0 if not np.isfinite(clip_limit) else float(clip_limit)
    numba_path = USE_NUMBA if use_numba is None else (use_numba and numba is not None)
    if numba_path:
        luts = _clahe_luts_numba_jit(lum, ey, ex, clip)
        return _clahe_apply_numba_jit(lum, luts, ey, ex)
    luts = _clahe_luts_numpy(lum, ey, ex, clip)
    return _clahe_apply_numpy(lum, luts, ey, ex)


# -- ensemble lattice scoring -----------------------------------------------

def _lattice_correct_numba(probs, labels, lattice):
    n, t, c = probs.shape
    k = lattice.shape[0]
    correct = np.zeros(k, dtype=np.int64)
    mixed = np.empty(c, dtype=np.float64)
    for q in range(k):
        hits = 0
        for i in range(n):
            for m in range(c):
                mixed[m] = 0.0
            for j in range(t):
                a = lattice[q, j]
                for m in range(c):
                    mixed[m] += a * probs[i, j, m]
            best = 0
            for m in range(c):
                if mixed[m] > mixed[best]:
                    best = m
            if best == labels[i]:
                hits += 1
        correct[q] = hits
    return correct


_lattice_correct_numba_jit = _jit(_lattice_correct_numba)


def _lattice_correct_numpy(probs, labels, lattice):
    n, t, c = probs.shape
    mixed = np.zeros((lattice.shape[0], n, c))
    for j in range(t):
        mixed += lattice[:, j, None, None] * probs[None, :, j, :]
    return (np.argmax(mixed, axis=2) == labels[None, :]).sum(axis=1).astype(np.int64)


def lattice_correct(probs: np.ndarray, labels: np.ndarray, lattice: np.ndarray,
                    use_numba: bool | None = None) -> np.ndarray:
    """Correct-prediction count of the weighted-mean combiner at each lattice point.

    Mixtures accumulate model by model in index order, the same order
    ``ensemble.mix`` uses, so both agree on argmax ties bit for bit.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    lattice = np.ascontiguousarray(lattice, dtype=np.float64)
    numba_path = USE_NUMBA if use_numba is None else (use_numba and numba is not None)
    fn = _lattice_correct_numba_jit if numba_path else _lattice_correct_numpy
    return fn(probs, labels, lattice)


# -- disc stamping -------------------------------------------------------------

def _stamp_numba(h, w, ys, xs, r):
    out = np.zeros((h, w), dtype=np.bool_)
    r2 = r * r
    for p in range(ys.shape[0]):
        cy = ys[p]
        cx = xs[p]
        y_lo = max(int(np.floor(cy - r)) - 1, 0)
        y_hi = min(int(np.ceil(cy + r)) + 1, h)
        x_lo = max(int(np.floor(cx - r)) - 1, 0)
        x_hi = min(int(np.ceil(cx + r)) + 1, w)
        for y in range(y_lo, y_hi):
            dy = y + 0.5 - cy
            for x in range(x_lo, x_hi):
                dx = x + 0.5 - cx
                if dy * dy + dx * dx <= r2:
                    out[y, x] = True
    return out


_stamp_numba_jit = _jit(_stamp_numba)


def _stamp_numpy(h, w, ys, xs, r):
    out = np.zeros((h, w), dtype=bool)
    k = int(np.ceil(r)) + 1
    for cy, cx in zip(ys, xs):
        y_lo, y_hi = max(int(np.floor(cy)) - k, 0), min(int(np.floor(cy)) + k + 1, h)
        x_lo, x_hi = max(int(np.floor(cx)) - k, 0), min(int(np.floor(cx)) + k + 1, w)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        dy = (np.arange(y_lo, y_hi) + 0.5 - cy)[:, None]
        dx = (np.arange(x_lo, x_hi) + 0.5 - cx)[None, :]
        out[y_lo:y_hi, x_lo:x_hi] |= dy * dy + dx * dx <= r * r
    return out


def stamp_discs(h: int, w: int, ys: np.ndarray, xs: np.ndarray, radius: float,
                use_numba: bool | None = None) -> np.ndarray:
    """Boolean mask of pixels whose centre lies within ``radius`` of any point."""
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    numba_path = USE_NUMBA if use_numba is None else (use_numba and numba is not None)
    fn = _stamp_numba_jit if numba_path else _stamp_numpy
    return fn(int(h), int(w), ys, xs, float(radius))
