"""NumPy reference implementations of the hot kernels.

Selected at import time when the compiled extension is unavailable (see
`backend`).  Shapes and semantics match `_kernels` exactly; the compiled
path is only faster.  Convolutions route through BLAS via shifted GEMMs.
"""

import numpy as np

NAME = "numpy"


def _pad1(x):
    d, h, w, c = x.shape
    out = np.zeros((d + 2, h + 2, w + 2, c), np.float32)
    out[1:-1, 1:-1, 1:-1] = x
    return out


def conv3d_fwd(x, w, b):
    """x [D,H,W,Ci] f32, w [27,Ci,Co] f32, b [Co] f32 -> [D,H,W,Co]; zero pad."""
    d, h, ww, ci = x.shape
    co = w.shape[2]
    xp = _pad1(x)
    out = np.broadcast_to(b, (d, h, ww, co)).astype(np.float32).copy()
    flat = out.reshape(-1, co)
    for k in range(27):
        dz, dy, dx = k // 9 - 1, (k // 3) % 3 - 1, k % 3 - 1
        src = xp[1 + dz:1 + dz + d, 1 + dy:1 + dy + h, 1 + dx:1 + dx + ww]
        flat += src.reshape(-1, ci) @ w[k]
    return out


def conv3d_bwd_weights(x, gy):
    """Gradients for w and b given input x and output grad gy."""
    d, h, ww, ci = x.shape
    co = gy.shape[3]
    xp = _pad1(x)
    gw = np.empty((27, ci, co), np.float32)
    g2 = gy.reshape(-1, co)
    for k in range(27):
        dz, dy, dx = k // 9 - 1, (k // 3) % 3 - 1, k % 3 - 1
        src = xp[1 + dz:1 + dz + d, 1 + dy:1 + dy + h, 1 + dx:1 + dx + ww]
        gw[k] = src.reshape(-1, ci).T @ g2
    gb = g2.sum(axis=0)
    return gw, gb


def trilinear_fwd(vol, coords):
    """vol [D,H,W,C] f32, coords [N,3] f64 in voxel-center units.

    Coordinates are clamped to the grid support [0, dim-1]; weights are
    computed in f64 then cast to f32, and corners accumulate in a fixed
    order so backends agree bitwise.
    """
    d, h, w, c = vol.shape
    u = np.clip(coords, 0.0, np.array([d - 1, h - 1, w - 1], np.float64))
    i0 = np.minimum(u.astype(np.int64), np.array([d - 2, h - 2, w - 2]))
    i0 = np.maximum(i0, 0)
    f = u - i0
    flat = vol.reshape(-1, c)
    out = np.zeros((coords.shape[0], c), np.float32)
    for cz in (0, 1):
        wz = f[:, 0] if cz else 1.0 - f[:, 0]
        for cy in (0, 1):
            wy = f[:, 1] if cy else 1.0 - f[:, 1]
            for cx in (0, 1):
                wx = f[:, 2] if cx else 1.0 - f[:, 2]
                wgt = (wz * wy * wx).astype(np.float32)
                lin = ((i0[:, 0] + cz) * h + i0[:, 1] + cy) * w + i0[:, 2] + cx
                out += flat[lin] * wgt[:, None]
    return out


def trilinear_bwd(vol, coords, gy):
    """Returns (gvol, gcoords). Coordinate grads are zero where clamped."""
    d, h, w, c = vol.shape
    dims = np.array([d - 1, h - 1, w - 1], np.float64)
    u = np.clip(coords, 0.0, dims)
    clamped = (coords <= 0.0) | (coords >= dims)
    i0 = np.minimum(u.astype(np.int64), np.array([d - 2, h - 2, w - 2]))
    i0 = np.maximum(i0, 0)
    f = u - i0
    flat = vol.reshape(-1, c)
    gvol = np.zeros_like(flat)
    gcoords = np.zeros_like(coords)
    for cz in (0, 1):
        wz, dz = (f[:, 0], 1.0) if cz else (1.0 - f[:, 0], -1.0)
        for cy in (0, 1):
            wy, dy = (f[:, 1], 1.0) if cy else (1.0 - f[:, 1], -1.0)
            for cx in (0, 1):
                wx, dx = (f[:, 2], 1.0) if cx else (1.0 - f[:, 2], -1.0)
                wgt = (wz * wy * wx).astype(np.float32)
                lin = ((i0[:, 0] + cz) * h + i0[:, 1] + cy) * w + i0[:, 2] + cx
                np.add.at(gvol, lin, gy * wgt[:, None])
                dot = np.einsum("nc,nc->n", flat[lin].astype(np.float64), gy.astype(np.float64))
                gcoords[:, 0] += dz * wy * wx * dot
                gcoords[:, 1] += wz * dy * wx * dot
                gcoords[:, 2] += wz * wy * dx * dot
    gcoords[clamped] = 0.0
    return gvol.reshape(vol.shape), gcoords


def nearest_fwd(vol, coords):
    """Floor-style voxel lookup (no interpolation, no coordinate gradient)."""
    d, h, w, c = vol.shape
    idx = np.clip(np.round(coords).astype(np.int64), 0, np.array([d - 1, h - 1, w - 1]))
    lin = (idx[:, 0] * h + idx[:, 1]) * w + idx[:, 2]
    return vol.reshape(-1, c)[lin].copy()


def nearest_bwd_vol(vol, coords, gy):
    d, h, w, c = vol.shape
    idx = np.clip(np.round(coords).astype(np.int64), 0, np.array([d - 1, h - 1, w - 1]))
    lin = (idx[:, 0] * h + idx[:, 1]) * w + idx[:, 2]
    gvol = np.zeros((d * h * w, c), np.float32)
    np.add.at(gvol, lin, gy)
    return gvol.reshape(vol.shape)


def scatter_mean_fwd(idx, feat, n_cells):
    """idx [N] int64, feat [N,F] f32 -> (mean [n_cells,F] f32, count [n_cells] f32)."""
    f = feat.shape[1]
    acc = np.zeros((n_cells, f), np.float32)
    np.add.at(acc, idx, feat)
    count = np.bincount(idx, minlength=n_cells).astype(np.float32)
    nz = count > 0
    acc[nz] /= count[nz, None]
    return acc, count


def scatter_mean_bwd(idx, count, gy):
    """gfeat [N,F]: each point receives its cell's grad / cell count."""
    safe = np.maximum(count, 1.0)
    return (gy / safe[:, None])[idx]
