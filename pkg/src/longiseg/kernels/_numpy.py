"""Pure-numpy reference kernels.

These are the fallback path when numba is unavailable or disabled, and the
baseline the benchmark compares against. Results match the numba kernels
exactly (same arithmetic order for interpolation, same label ordering).
"""

import numpy as np


def sample_trilinear(vol, coords):
    """Trilinearly sample ``vol`` (D, H, W) at voxel coordinates ``coords``.

    ``coords`` has shape (3, ...) holding (d, h, w) positions. Positions
    outside the grid are clamped to the border.
    """
    vol = np.asarray(vol, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    flat = coords.reshape(3, -1)

    idx0 = []
    idx1 = []
    frac = []
    for axis in range(3):
        n = vol.shape[axis]
        p = np.clip(flat[axis], 0.0, n - 1)
        i0 = np.floor(p).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        idx0.append(i0)
        idx1.append(i1)
        frac.append(p - i0)

    fd, fh, fw = frac
    d0, h0, w0 = idx0
    d1, h1, w1 = idx1
    c00 = vol[d0, h0, w0] * (1.0 - fw) + vol[d0, h0, w1] * fw
    c01 = vol[d0, h1, w0] * (1.0 - fw) + vol[d0, h1, w1] * fw
    c10 = vol[d1, h0, w0] * (1.0 - fw) + vol[d1, h0, w1] * fw
    c11 = vol[d1, h1, w0] * (1.0 - fw) + vol[d1, h1, w1] * fw
    c0 = c00 * (1.0 - fh) + c01 * fh
    c1 = c10 * (1.0 - fh) + c11 * fh
    out = c0 * (1.0 - fd) + c1 * fd
    return out.reshape(out_shape)


def neighbor_offsets(connectivity):
    """Offsets (dd, dh, dw) of the neighbours for 6/18/26 connectivity."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    offsets = []
    for dd in (-1, 0, 1):
        for dh in (-1, 0, 1):
            for dw in (-1, 0, 1):
                n = abs(dd) + abs(dh) + abs(dw)
                if n == 0:
                    continue
                if connectivity == 6 and n > 1:
                    continue
                if connectivity == 18 and n > 2:
                    continue
                offsets.append((dd, dh, dw))
    return np.array(offsets, dtype=np.int64)


def _shifted(a, off, fill):
    # out[p] = a[p + off], ``fill`` where p + off leaves the grid
    out = np.full_like(a, fill)
    src = []
    dst = []
    for o, n in zip(off, a.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = a[tuple(src)]
    return out


def label_components(mask, connectivity=26):
    """Label connected foreground regions by iterated min-label propagation.

    Labels are 1..n ordered by each component's first voxel in C order.
    """
    fg = np.asarray(mask).astype(bool)
    offsets = neighbor_offsets(connectivity)
    big = np.iinfo(np.int64).max
    labels = np.where(fg, np.arange(fg.size, dtype=np.int64).reshape(fg.shape), big)
    while True:
        new = labels.copy()
        for off in offsets:
            np.minimum(new, _shifted(labels, off, big), out=new)
        new[~fg] = big
        if np.array_equal(new, labels):
            break
        labels = new
    out = np.zeros(fg.shape, dtype=np.int64)
    if not fg.any():
        return out, 0
    roots, inverse = np.unique(labels[fg], return_inverse=True)
    out[fg] = inverse + 1
    return out, int(roots.size)
