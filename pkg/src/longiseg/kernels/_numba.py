"""numba-compiled kernels; same contracts as :mod:`longiseg.kernels._numpy`."""

import numpy as np
from numba import njit

from ._numpy import neighbor_offsets


@njit(cache=True)
def _trilinear_flat(vol, cd, ch, cw, out):
    nd, nh, nw = vol.shape
    for k in range(cd.size):
        pd = min(max(cd[k], 0.0), nd - 1.0)
        ph = min(max(ch[k], 0.0), nh - 1.0)
        pw = min(max(cw[k], 0.0), nw - 1.0)
        d0 = int(np.floor(pd))
        h0 = int(np.floor(ph))
        w0 = int(np.floor(pw))
        d1 = min(d0 + 1, nd - 1)
        h1 = min(h0 + 1, nh - 1)
        w1 = min(w0 + 1, nw - 1)
        fd = pd - d0
        fh = ph - h0
        fw = pw - w0
        c00 = vol[d0, h0, w0] * (1.0 - fw) + vol[d0, h0, w1] * fw
        c01 = vol[d0, h1, w0] * (1.0 - fw) + vol[d0, h1, w1] * fw
        c10 = vol[d1, h0, w0] * (1.0 - fw) + vol[d1, h0, w1] * fw
        c11 = vol[d1, h1, w0] * (1.0 - fw) + vol[d1, h1, w1] * fw
        c0 = c00 * (1.0 - fh) + c01 * fh
        c1 = c10 * (1.0 - fh) + c11 * fh
        out[k] = c0 * (1.0 - fd) + c1 * fd


def sample_trilinear(vol, coords):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    flat = np.ascontiguousarray(coords.reshape(3, -1))
    out = np.empty(flat.shape[1], dtype=np.float64)
    _trilinear_flat(vol, flat[0], flat[1], flat[2], out)
    return out.reshape(out_shape)


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _union_find_label(fg, offsets, out):
    nd, nh, nw = fg.shape
    n = nd * nh * nw
    parent = np.arange(n)
    for d in range(nd):
        for h in range(nh):
            for w in range(nw):
                if not fg[d, h, w]:
                    continue
                i = (d * nh + h) * nw + w
                for k in range(offsets.shape[0]):
                    dd = d + offsets[k, 0]
                    hh = h + offsets[k, 1]
                    ww = w + offsets[k, 2]
                    if dd < 0 or hh < 0 or ww < 0 or dd >= nd or hh >= nh or ww >= nw:
                        continue
                    if not fg[dd, hh, ww]:
                        continue
                    j = (dd * nh + hh) * nw + ww
                    if j >= i:
                        continue
                    ri = _find(parent, i)
                    rj = _find(parent, j)
                    if ri != rj:
                        # keep the smaller index as root
                        if ri < rj:
                            parent[rj] = ri
                        else:
                            parent[ri] = rj
    label_of_root = np.zeros(n, dtype=np.int64)
    count = 0
    for d in range(nd):
        for h in range(nh):
            for w in range(nw):
                if not fg[d, h, w]:
                    continue
                r = _find(parent, (d * nh + h) * nw + w)
                if label_of_root[r] == 0:
                    count += 1
                    label_of_root[r] = count
                out[d, h, w] = label_of_root[r]
    return count


def label_components(mask, connectivity=26):
    fg = np.ascontiguousarray(np.asarray(mask).astype(np.bool_))
    out = np.zeros(fg.shape, dtype=np.int64)
    offsets = neighbor_offsets(connectivity)
    count = _union_find_label(fg, offsets, out)
    return out, int(count)
