"""Compiled inner loops (numba). Pure functions over plain arrays.

Volume arrays are indexed ``data[i, j, k]`` (x, y, z). Continuous voxel
coordinates put voxel centres on integers; the grid box spans
``[-0.5, n - 0.5]`` along every axis. Inside the box, samples beyond the
outermost centres are clamped to the edge voxels; outside the box the value
is zero.
"""

import math
import warnings

import numba as nb
import numpy as np

# numba probes TBB first and warns when the installed version is too old;
# it then falls back to another threading layer, so the warning is noise
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

_OPTS = dict(cache=True, nogil=True, fastmath=False)


@nb.njit(**_OPTS)
def trilinear(data, ci, cj, ck):
    nx, ny, nz = data.shape
    if ci < -0.5 or cj < -0.5 or ck < -0.5:
        return 0.0
    if ci > nx - 0.5 or cj > ny - 0.5 or ck > nz - 0.5:
        return 0.0
    ci = min(max(ci, 0.0), nx - 1.0)
    cj = min(max(cj, 0.0), ny - 1.0)
    ck = min(max(ck, 0.0), nz - 1.0)
    i0 = min(int(ci), nx - 2)
    j0 = min(int(cj), ny - 2)
    k0 = min(int(ck), nz - 2)
    fx = ci - i0
    fy = cj - j0
    fz = ck - k0
    c00 = data[i0, j0, k0] * (1.0 - fz) + data[i0, j0, k0 + 1] * fz
    c01 = data[i0, j0 + 1, k0] * (1.0 - fz) + data[i0, j0 + 1, k0 + 1] * fz
    c10 = data[i0 + 1, j0, k0] * (1.0 - fz) + data[i0 + 1, j0, k0 + 1] * fz
    c11 = data[i0 + 1, j0 + 1, k0] * (1.0 - fz) + data[i0 + 1, j0 + 1, k0 + 1] * fz
    c0 = c00 * (1.0 - fy) + c01 * fy
    c1 = c10 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fx) + c1 * fx


@nb.njit(**_OPTS)
def trilinear_many(data, coords):
    out = np.empty(coords.shape[0])
    for n in range(coords.shape[0]):
        out[n] = trilinear(data, coords[n, 0], coords[n, 1], coords[n, 2])
    return out


@nb.njit(**_OPTS)
def clip_box(o, d, lo, hi):
    """Slab test of the ray ``o + t d`` against the box ``[lo, hi]``."""
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    return t0, t1


@nb.njit(**_OPTS)
def integrate_segment(data, o, d, t_entry, t_exit, step, threshold):
    """Composite midpoint rule of the sampled field on ``[t_entry, t_exit]``.

    ``o`` and ``d`` are in continuous voxel coordinates per mm of ray length,
    so ``o + t d`` is the voxel coordinate at arc length ``t`` (mm).
    Samples below ``threshold`` are zeroed before accumulation.
    """
    length = t_exit - t_entry
    if length <= 0.0:
        return 0.0
    n = int(math.ceil(length / step - 1e-9))
    if n < 1:
        n = 1
    h = length / n
    acc = 0.0
    for m in range(n):
        t = t_entry + (m + 0.5) * h
        v = trilinear(data, o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2])
        if v >= threshold:
            acc += v
    return acc * h


SKIP_BLOCK = 8


@nb.njit(**_OPTS)
def skip_grid(data, threshold):
    """Per 8^3 block: True when every sample drawn inside it contributes nothing.

    A block is skippable when the maximum over its voxels plus a one-voxel
    halo (the trilinear support) is below ``threshold``, or when all those
    voxels are exactly zero. Skipping is therefore exact.
    """
    nx, ny, nz = data.shape
    bx = (nx + SKIP_BLOCK - 1) // SKIP_BLOCK
    by = (ny + SKIP_BLOCK - 1) // SKIP_BLOCK
    bz = (nz + SKIP_BLOCK - 1) // SKIP_BLOCK
    out = np.empty((bx, by, bz), dtype=np.bool_)
    for a in range(bx):
        for b in range(by):
            for c in range(bz):
                vmax = -np.inf
                allzero = True
                for i in range(max(a * SKIP_BLOCK - 1, 0), min((a + 1) * SKIP_BLOCK + 1, nx)):
                    for j in range(max(b * SKIP_BLOCK - 1, 0), min((b + 1) * SKIP_BLOCK + 1, ny)):
                        for k in range(max(c * SKIP_BLOCK - 1, 0), min((c + 1) * SKIP_BLOCK + 1, nz)):
                            v = data[i, j, k]
                            if v > vmax:
                                vmax = v
                            if v != 0.0:
                                allzero = False
                out[a, b, c] = vmax < threshold or allzero
    return out


@nb.njit(**_OPTS)
def _axis_exit(o, d, blk, nblk):
    if d > 0.0:
        if blk == nblk - 1:
            return np.inf
        return ((blk + 1) * SKIP_BLOCK - o) / d
    if d < 0.0:
        if blk == 0:
            return np.inf
        return (blk * SKIP_BLOCK - o) / d
    return np.inf


@nb.njit(**_OPTS)
def _block_exit(o, d, a, b, c, bx, by, bz):
    """Ray parameter where the (clamped) sample position leaves block ``(a, b, c)``."""
    return min(_axis_exit(o[0], d[0], a, bx), _axis_exit(o[1], d[1], b, by),
               _axis_exit(o[2], d[2], c, bz))


@nb.njit(**_OPTS)
def _march(data, skip, o, d, t_entry, t_exit, step, threshold):
    """Same quadrature as :func:`integrate_segment`, skipping empty blocks."""
    length = t_exit - t_entry
    if length <= 0.0:
        return 0.0
    n = int(math.ceil(length / step - 1e-9))
    if n < 1:
        n = 1
    h = length / n
    nx, ny, nz = data.shape
    mx = nx - 1.0
    my = ny - 1.0
    mz = nz - 1.0
    bx, by, bz = skip.shape
    acc = 0.0
    m = 0
    while m < n:
        t = t_entry + (m + 0.5) * h
        ci = min(max(o[0] + t * d[0], 0.0), mx)
        cj = min(max(o[1] + t * d[1], 0.0), my)
        ck = min(max(o[2] + t * d[2], 0.0), mz)
        i0 = int(ci)
        j0 = int(cj)
        k0 = int(ck)
        a = i0 // SKIP_BLOCK
        b = j0 // SKIP_BLOCK
        c = k0 // SKIP_BLOCK
        if skip[a, b, c]:
            # jump to the first sample that may lie beyond this block;
            # undershooting is harmless, the check above runs again
            t_blk = _block_exit(o, d, a, b, c, bx, by, bz)
            m_next = int(math.ceil((t_blk - t_entry) / h - 0.5 - 1e-9))
            m = max(m + 1, m_next)
            continue
        m += 1
        i0 = min(i0, nx - 2)
        j0 = min(j0, ny - 2)
        k0 = min(k0, nz - 2)
        fx = ci - i0
        fy = cj - j0
        fz = ck - k0
        c00 = data[i0, j0, k0] * (1.0 - fz) + data[i0, j0, k0 + 1] * fz
        c01 = data[i0, j0 + 1, k0] * (1.0 - fz) + data[i0, j0 + 1, k0 + 1] * fz
        c10 = data[i0 + 1, j0, k0] * (1.0 - fz) + data[i0 + 1, j0, k0 + 1] * fz
        c11 = data[i0 + 1, j0 + 1, k0] * (1.0 - fz) + data[i0 + 1, j0 + 1, k0 + 1] * fz
        c0 = c00 * (1.0 - fy) + c01 * fy
        c1 = c10 * (1.0 - fy) + c11 * fy
        v = c0 * (1.0 - fx) + c1 * fx
        if v >= threshold:
            acc += v
    return acc * h


@nb.njit(parallel=True, cache=True, nogil=True, fastmath=False)
def render_rays(data, skip, spacing, origin, src_vol, pix_vol, step, threshold, exponential):
    """Render a detector given per-pixel world points already in volume frame.

    ``src_vol`` (3,) is the source and ``pix_vol`` (H, W, 3) the pixel centres,
    both expressed in volume coordinates (mm). Rows are processed in parallel;
    each pixel is an independent sequential sum, so the result does not
    depend on the thread count.
    """
    H = pix_vol.shape[0]
    W = pix_vol.shape[1]
    out = np.empty((H, W))
    nx, ny, nz = data.shape
    lo = np.array([-0.5, -0.5, -0.5])
    hi = np.array([nx - 0.5, ny - 0.5, nz - 0.5])
    o = np.empty(3)
    for a in range(3):
        o[a] = (src_vol[a] - origin[a]) / spacing[a] - 0.5
    for r in nb.prange(H):
        dv = np.empty(3)
        for c in range(W):
            dx = pix_vol[r, c, 0] - src_vol[0]
            dy = pix_vol[r, c, 1] - src_vol[1]
            dz = pix_vol[r, c, 2] - src_vol[2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dv[0] = dx / norm / spacing[0]
            dv[1] = dy / norm / spacing[1]
            dv[2] = dz / norm / spacing[2]
            t0, t1 = clip_box(o, dv, lo, hi)
            t0 = max(t0, 0.0)
            val = 0.0
            if t1 > t0:
                val = _march(data, skip, o, dv, t0, t1, step, threshold)
            if exponential:
                val = math.exp(-val)
            out[r, c] = val
    return out


@nb.njit(**_OPTS)
def bilinear(img, u, v):
    """Bilinear sample of ``img[v, u]``; NaN outside the pixel-centre grid."""
    H, W = img.shape
    if u < 0.0 or v < 0.0 or u > W - 1.0 or v > H - 1.0:
        return np.nan
    u0 = min(int(u), W - 2)
    v0 = min(int(v), H - 2)
    fu = u - u0
    fv = v - v0
    a = img[v0, u0] * (1.0 - fu) + img[v0, u0 + 1] * fu
    b = img[v0 + 1, u0] * (1.0 - fu) + img[v0 + 1, u0 + 1] * fu
    return a * (1.0 - fv) + b * fv


@nb.njit(**_OPTS)
def _zncc(a, b):
    n = a.shape[0]
    ma = 0.0
    mb = 0.0
    for i in range(n):
        ma += a[i]
        mb += b[i]
    ma /= n
    mb /= n
    sab = 0.0
    saa = 0.0
    sbb = 0.0
    for i in range(n):
        da = a[i] - ma
        db = b[i] - mb
        sab += da * db
        saa += da * da
        sbb += db * db
    # relative floor: patches that are constant up to rounding count as flat
    if saa <= 1e-20 * n or sbb <= 1e-20 * n:
        return np.nan
    r = sab / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


@nb.njit(parallel=True, cache=True, nogil=True, fastmath=False)
def line_search_zncc(moving, fixed, p, d, half, offsets):
    """ZNCC profile along ``p + s d`` for every point.

    ``moving``/``fixed`` are 2D images; ``p`` (N, 2) pixel positions in the
    moving image; ``d`` (N, 2) unit search directions; ``half`` the patch
    half-width; ``offsets`` (S,) candidate displacements along ``d``.
    Returns ``(N, S)`` scores, NaN where a patch leaves the image or is flat.
    """
    N = p.shape[0]
    S = offsets.shape[0]
    side = 2 * half + 1
    npix = side * side
    out = np.full((N, S), np.nan)
    for n in nb.prange(N):
        ref = np.empty(npix)
        cand = np.empty(npix)
        ok = True
        m = 0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                val = bilinear(moving, p[n, 0] + dx, p[n, 1] + dy)
                if np.isnan(val):
                    ok = False
                ref[m] = val
                m += 1
        if not ok:
            continue
        for s in range(S):
            cu = p[n, 0] + offsets[s] * d[n, 0]
            cv = p[n, 1] + offsets[s] * d[n, 1]
            inside = True
            m = 0
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    val = bilinear(fixed, cu + dx, cv + dy)
                    if np.isnan(val):
                        inside = False
                        break
                    cand[m] = val
                    m += 1
                if not inside:
                    break
            if inside:
                out[n, s] = _zncc(ref, cand)
    return out
