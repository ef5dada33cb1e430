# cython: boundscheck=False, wraparound=False, language_level=3
"""Cython bridge to the compiled hot kernels (see kernels_core.c)."""

import threading

import numpy as np

cimport numpy as cnp

_tls = threading.local()

cdef extern from "kernels_core.h":
    void df_conv3d_fwd(const float *xpad, const float *w, const float *b,
                       float *out, long D, long H, long W, long Ci, long Co) nogil
    void df_conv3d_bwd_w(const float *xpad, const float *gy,
                         float *gw, float *gb,
                         long D, long H, long W, long Ci, long Co) nogil
    void df_trilinear_fwd(const float *vol, const double *coords, float *out,
                          long N, long D, long H, long W, long C) nogil
    void df_trilinear_bwd(const float *vol, const double *coords, const float *gy,
                          float *gvol, double *gcoords,
                          long N, long D, long H, long W, long C) nogil

NAME = "native"


def _pad1(cnp.ndarray[cnp.float32_t, ndim=4] x):
    # thread-local scratch buffer: padding runs every conv call and large
    # repeated allocations dominate otherwise
    cdef long d = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    shape = (d + 2, h + 2, w + 2, c)
    out = getattr(_tls, "pad", None)
    if out is None or out.shape != shape:
        out = np.zeros(shape, np.float32)
        _tls.pad = out
    else:
        out.fill(0.0)
    out[1:-1, 1:-1, 1:-1] = x
    return out


def conv3d_fwd(x, w, b):
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xpad = _pad1(np.ascontiguousarray(x, np.float32))
    cdef cnp.ndarray[cnp.float32_t, ndim=3] wc = np.ascontiguousarray(w, np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] bc = np.ascontiguousarray(b, np.float32)
    cdef long D = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef long Ci = x.shape[3], Co = wc.shape[2]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] out = np.empty((D, H, W, Co), np.float32)
    with nogil:
        df_conv3d_fwd(&xpad[0, 0, 0, 0], &wc[0, 0, 0], &bc[0], &out[0, 0, 0, 0], D, H, W, Ci, Co)
    return out


def conv3d_bwd_weights(x, gy):
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xpad = _pad1(np.ascontiguousarray(x, np.float32))
    cdef cnp.ndarray[cnp.float32_t, ndim=4] g = np.ascontiguousarray(gy, np.float32)
    cdef long D = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef long Ci = x.shape[3], Co = g.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=3] gw = np.empty((27, Ci, Co), np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] gb = np.empty(Co, np.float32)
    with nogil:
        df_conv3d_bwd_w(&xpad[0, 0, 0, 0], &g[0, 0, 0, 0], &gw[0, 0, 0], &gb[0], D, H, W, Ci, Co)
    return gw, gb


def trilinear_fwd(vol, coords):
    cdef cnp.ndarray[cnp.float32_t, ndim=4] v = np.ascontiguousarray(vol, np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u = np.ascontiguousarray(coords, np.float64)
    cdef long N = u.shape[0]
    cdef long D = v.shape[0], H = v.shape[1], W = v.shape[2], C = v.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((N, C), np.float32)
    if N == 0:
        return out
    with nogil:
        df_trilinear_fwd(&v[0, 0, 0, 0], &u[0, 0], &out[0, 0], N, D, H, W, C)
    return out


def trilinear_bwd(vol, coords, gy):
    cdef cnp.ndarray[cnp.float32_t, ndim=4] v = np.ascontiguousarray(vol, np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u = np.ascontiguousarray(coords, np.float64)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] g = np.ascontiguousarray(gy, np.float32)
    cdef long N = u.shape[0]
    cdef long D = v.shape[0], H = v.shape[1], W = v.shape[2], C = v.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] gvol = np.zeros((D, H, W, C), np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gcoords = np.zeros((N, 3), np.float64)
    if N == 0:
        return gvol, gcoords
    with nogil:
        df_trilinear_bwd(&v[0, 0, 0, 0], &u[0, 0], &g[0, 0],
                         &gvol[0, 0, 0, 0], &gcoords[0, 0], N, D, H, W, C)
    return gvol, gcoords


# nearest / scatter stay in NumPy: they are not hot enough to matter
from .kernels_numpy import nearest_bwd_vol, nearest_fwd, scatter_mean_bwd, scatter_mean_fwd  # noqa: E402,F401
