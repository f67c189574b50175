"""Pure NumPy implementations of the hot loops (reference + fallback).

The compiled module ``_kernels`` exposes the same four functions with the same
signatures and must agree with these to rounding.
"""

import numpy as np


def searchsorted_rows(cdf, rows, u):
    """For each shot, the first outcome index whose cumulative probability exceeds u.

    cdf : (K, M) cumulative tables, rows : (n,) table index per shot, u : (n,) in [0, 1).
    """
    cdf = np.ascontiguousarray(cdf, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    n_rows, m = cdf.shape
    # rows are shifted apart by 2 so one flat search serves every table
    flat = (cdf + 2.0 * np.arange(n_rows)[:, None]).ravel()
    idx = np.searchsorted(flat, u + 2.0 * rows, side="right") - rows * m
    idx = np.clip(idx, 0, m - 1)
    # the shift rounds; step back onto the exact answer against the raw table
    while True:
        down = (idx > 0) & (cdf[rows, idx - 1] > u)
        up = (idx < m - 1) & (cdf[rows, idx] <= u)
        if not (down.any() or up.any()):
            break
        idx = idx - down + up
    return idx.astype(np.int64)


def scatter_matrices(x, y):
    """Scatter matrices D^T D for a batch of samples; x, y : (E, n) -> (E, 6, 6)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)
    return np.einsum("eni,enj->eij", design, design)


def g_means(x, y, ca, cb):
    """Sample means of the one-parameter-fit functions g_0..g_3; x, y : (E, n) -> (E, 4)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = ca * cb
    p = x * y
    q = cb * cb * x * x + ca * ca * y * y - k * k
    out = np.empty(x.shape[:-1] + (4,))
    out[..., 0] = (q * p).mean(axis=-1)
    out[..., 1] = -k * (q + 2.0 * p * p).mean(axis=-1)
    out[..., 2] = 3.0 * k * k * p.mean(axis=-1)
    out[..., 3] = -k**3
    return out


def project_to_ellipse(u, v, e0, e1, max_iter=200):
    """Closest points on the axis-aligned ellipse (x/e0)^2 + (y/e1)^2 = 1.

    Requires e0 >= e1 > 0.  Works in the first quadrant and restores signs;
    the interior/exterior root of the orthogonality condition is bracketed and
    bisected to machine precision.  Returns the foot points (x, y).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    y0 = np.abs(u)
    y1 = np.abs(v)
    x0 = np.empty_like(y0)
    x1 = np.empty_like(y1)

    gen = (y1 > 0) & (y0 > 0)
    on_minor = (y1 > 0) & (y0 == 0)
    on_major = y1 == 0

    # generic case: root s of (r0 z0/(s+r0))^2 + (z1/(s+1))^2 = 1
    if np.any(gen):
        z0 = y0[gen] / e0
        z1 = y1[gen] / e1
        g = z0 * z0 + z1 * z1 - 1.0
        r0 = (e0 / e1) ** 2
        n0 = r0 * z0
        s0 = z1 - 1.0
        s1 = np.where(g < 0, 0.0, np.hypot(n0, z1) - 1.0)
        s = 0.5 * (s0 + s1)
        done = g == 0
        for _ in range(max_iter):
            s = 0.5 * (s0 + s1)
            stuck = (s == s0) | (s == s1)
            done = done | stuck
            if np.all(done):
                break
            ratio0 = n0 / (s + r0)
            ratio1 = z1 / (s + 1.0)
            gs = ratio0 * ratio0 + ratio1 * ratio1 - 1.0
            upd = ~done
            s0 = np.where(upd & (gs > 0), s, s0)
            s1 = np.where(upd & (gs < 0), s, s1)
            done = done | (gs == 0)
        s = np.where(g == 0, 0.0, s)
        x0[gen] = r0 * y0[gen] / (s + r0)
        x1[gen] = y1[gen] / (s + 1.0)

    if np.any(on_minor):
        x0[on_minor] = 0.0
        x1[on_minor] = e1

    if np.any(on_major):
        numer0 = e0 * y0[on_major]
        denom0 = e0 * e0 - e1 * e1
        inside = numer0 < denom0
        xde0 = np.where(inside, numer0 / np.where(denom0 > 0, denom0, 1.0), 1.0)
        x0[on_major] = np.where(inside, e0 * xde0, e0)
        x1[on_major] = np.where(inside, e1 * np.sqrt(np.clip(1.0 - xde0 * xde0, 0.0, None)), 0.0)

    return np.copysign(x0, u), np.copysign(x1, v)
