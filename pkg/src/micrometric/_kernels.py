"""Compiled reduction kernels.

Every reduction splits its input into fixed ``CHUNK``-sized blocks, sums each
block with Neumaier compensation and then combines the block sums in index
order. Block boundaries never depend on the thread count, so serial and
parallel runs are bit-identical.
"""

import warnings

import numba
import numpy as np

# kernels may be entered from several Python threads at once; the workqueue
# layer is not safe for that and TBB is often too old to load
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
numba.config.THREADING_LAYER = "threadsafe"
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB version")

CHUNK = 1 << 16


@numba.njit(cache=True)
def _neumaier(values):
    s = 0.0
    comp = 0.0
    for i in range(values.size):
        v = values[i]
        t = s + v
        if abs(s) >= abs(v):
            comp += (s - t) + v
        else:
            comp += (v - t) + s
        s = t
    return s + comp


@numba.njit(parallel=True, cache=True)
def _block_sums(flat, out):
    n = flat.size
    for k in numba.prange(out.size):
        start = k * CHUNK
        stop = min(start + CHUNK, n)
        s = 0.0
        comp = 0.0
        for i in range(start, stop):
            v = float(flat[i])
            t = s + v
            if abs(s) >= abs(v):
                comp += (s - t) + v
            else:
                comp += (v - t) + s
            s = t
        out[k] = s + comp


@numba.njit(inline="always")
def _scaled_ssim(mx, my, vx, vy, vxy, alpha, c1, c2):
    num = (2.0 * alpha * mx * my + c1) * (2.0 * alpha * vxy + c2)
    den = (alpha * alpha * vy + c2 + vx) * (alpha * alpha * my * my + c1 + mx * mx)
    return num / den


@numba.njit(inline="always")
def _scaled_ssim_derivative(mx, my, vx, vy, vxy, alpha, c1, c2):
    # the four terms of d/dalpha SSIM(x, alpha*y), kept in their literal form
    lum = 2.0 * alpha * mx * my + c1
    cs = 2.0 * alpha * vxy + c2
    d1 = alpha * alpha * vy + c2 + vx
    d2 = alpha * alpha * my * my + c1 + mx * mx
    t1 = -(2.0 * alpha * vy * cs * lum) / (d1 * d1 * d2)
    t2 = -(2.0 * alpha * my * my * cs * lum) / (d1 * d2 * d2)
    t3 = (2.0 * vxy * lum) / (d1 * d2)
    t4 = (2.0 * mx * my * cs) / (d1 * d2)
    return t1 + t2 + t3 + t4


@numba.njit(parallel=True, cache=True)
def _objective_blocks(ux, uy, vx, vy, vxy, alpha, c1, c2, out_f, out_g):
    # objective and derivative share one pass over the (memory-bound) stats
    n = ux.size
    for k in numba.prange(out_f.size):
        start = k * CHUNK
        stop = min(start + CHUNK, n)
        s = 0.0
        comp = 0.0
        sg = 0.0
        compg = 0.0
        for i in range(start, stop):
            a = float(ux[i])
            b = float(uy[i])
            p = float(vx[i])
            q = float(vy[i])
            r = float(vxy[i])
            v = _scaled_ssim(a, b, p, q, r, alpha, c1, c2)
            t = s + v
            if abs(s) >= abs(v):
                comp += (s - t) + v
            else:
                comp += (v - t) + s
            s = t
            g = _scaled_ssim_derivative(a, b, p, q, r, alpha, c1, c2)
            t = sg + g
            if abs(sg) >= abs(g):
                compg += (sg - t) + g
            else:
                compg += (g - t) + sg
            sg = t
        out_f[k] = s + comp
        out_g[k] = sg + compg


ROW_BLOCK = 64


@numba.njit(parallel=True, cache=True)
def _window_moments(x, y, profile, ux, uy, vx, vy, vxy):
    # separable weighted moments over valid windows; each task filters a
    # block of output rows (recomputing side-1 halo rows) so memory stays
    # bounded and results do not depend on scheduling
    h, w = x.shape
    side = profile.size
    hv = h - side + 1
    wv = w - side + 1
    nblocks = (hv + ROW_BLOCK - 1) // ROW_BLOCK
    for blk in numba.prange(nblocks):
        r0 = blk * ROW_BLOCK
        r1 = min(r0 + ROW_BLOCK, hv)
        rows = r1 - r0 + side - 1
        hx = np.empty((rows, wv))
        hy = np.empty((rows, wv))
        hxx = np.empty((rows, wv))
        hyy = np.empty((rows, wv))
        hxy = np.empty((rows, wv))
        for i in range(rows):
            xi = x[r0 + i]
            yi = y[r0 + i]
            for j in range(wv):
                sx = 0.0
                sy = 0.0
                sxx = 0.0
                syy = 0.0
                sxy = 0.0
                for t in range(side):
                    wt = profile[t]
                    a = xi[j + t]
                    b = yi[j + t]
                    sx += wt * a
                    sy += wt * b
                    sxx += wt * (a * a)
                    syy += wt * (b * b)
                    sxy += wt * (a * b)
                hx[i, j] = sx
                hy[i, j] = sy
                hxx[i, j] = sxx
                hyy[i, j] = syy
                hxy[i, j] = sxy
        for i in range(r1 - r0):
            for j in range(wv):
                mx = 0.0
                my = 0.0
                mxx = 0.0
                myy = 0.0
                mxy = 0.0
                for t in range(side):
                    wt = profile[t]
                    mx += wt * hx[i + t, j]
                    my += wt * hy[i + t, j]
                    mxx += wt * hxx[i + t, j]
                    myy += wt * hyy[i + t, j]
                    mxy += wt * hxy[i + t, j]
                ux[r0 + i, j] = mx
                uy[r0 + i, j] = my
                vx[r0 + i, j] = max(mxx - mx * mx, 0.0)
                vy[r0 + i, j] = max(myy - my * my, 0.0)
                vxy[r0 + i, j] = mxy - mx * my


@numba.njit(parallel=True, cache=True)
def _closed_form_blocks(ux, uy, vx, vy, vxy, out, counts):
    # writes valid per-window closed-form values compacted per block;
    # counts[k] is the number written for block k at out[k*CHUNK:]
    n = ux.size
    for k in numba.prange(counts.size):
        start = k * CHUNK
        stop = min(start + CHUNK, n)
        m = 0
        for i in range(start, stop):
            a = float(ux[i])
            b = float(uy[i])
            p = float(vx[i])
            q = float(vy[i])
            r = float(vxy[i])
            if a > 0.0 and b > 0.0 and p > 0.0 and q > 0.0 and r > 0.0:
                out[start + m] = np.sqrt((np.sqrt(p) * a) / (np.sqrt(q) * b))
                m += 1
        counts[k] = m


def _n_blocks(n):
    return max(1, -(-n // CHUNK))


def stable_sum(values):
    """Compensated sum in fixed row-major block order."""
    flat = np.ascontiguousarray(values).reshape(-1)
    out = np.empty(_n_blocks(flat.size), dtype=np.float64)
    _block_sums(flat, out)
    return float(_neumaier(out))


def stable_mean(values):
    flat = np.ascontiguousarray(values).reshape(-1)
    if flat.size == 0:
        raise ValueError("mean of an empty array")
    return stable_sum(flat) / flat.size


def objective_sums(ux, uy, vx, vy, vxy, alpha, c1, c2):
    """Sums over windows of SSIM(x, alpha*y) and of its alpha-derivative."""
    out_f = np.empty(_n_blocks(ux.size), dtype=np.float64)
    out_g = np.empty_like(out_f)
    _objective_blocks(ux, uy, vx, vy, vxy, float(alpha), float(c1), float(c2), out_f, out_g)
    return float(_neumaier(out_f)), float(_neumaier(out_g))


def window_moments(x, y, profile):
    """Valid-region weighted means, variances (clamped at 0) and covariance.

    ``x`` and ``y`` are same-shape float64 images; the 2-D window is the
    outer product of ``profile`` with itself.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    profile = np.ascontiguousarray(profile, dtype=np.float64)
    side = profile.size
    shape = (x.shape[0] - side + 1, x.shape[1] - side + 1)
    out = [np.empty(shape) for _ in range(5)]
    _window_moments(x, y, profile, *out)
    return out


def closed_form_values(ux, uy, vx, vy, vxy):
    """Per-window closed-form scale factors for windows meeting the positivity preconditions."""
    n = ux.size
    out = np.empty(n, dtype=np.float64)
    counts = np.empty(_n_blocks(n), dtype=np.int64)
    _closed_form_blocks(ux, uy, vx, vy, vxy, out, counts)
    # compact in place, block order preserved
    pos = 0
    for k, m in enumerate(counts):
        start = k * CHUNK
        if m and start != pos:
            out[pos:pos + m] = out[start:start + m]
        pos += m
    return out[:pos]
