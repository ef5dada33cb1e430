"""Native (Cython/C) kernels must agree with the NumPy reference."""

import numpy as np
import pytest

from descfields.diffmath import backend

pytestmark = pytest.mark.skipif(
    not backend.HAVE_NATIVE, reason="compiled kernels not built"
)


def pair():
    b = backend.backends()
    return b["numpy"], b["native"]


@pytest.mark.parametrize("ci,co", [(3, 2), (17, 16), (8, 32), (5, 7)])
def test_conv_fwd_parity(ci, co):
    np_k, c_k = pair()
    rng = np.random.default_rng(ci * 100 + co)
    x = rng.normal(size=(8, 8, 8, ci)).astype(np.float32)
    w = rng.normal(size=(27, ci, co)).astype(np.float32) * 0.2
    b = rng.normal(size=co).astype(np.float32)
    a = np_k.conv3d_fwd(x, w, b)
    c = c_k.conv3d_fwd(x, w, b)
    assert np.abs(a - c).max() < 1e-4 * max(1.0, np.abs(a).max())


@pytest.mark.parametrize("ci,co", [(3, 2), (17, 16), (6, 32)])
def test_conv_bwd_weights_parity(ci, co):
    np_k, c_k = pair()
    rng = np.random.default_rng(ci * 7 + co)
    x = rng.normal(size=(6, 6, 6, ci)).astype(np.float32)
    gy = rng.normal(size=(6, 6, 6, co)).astype(np.float32)
    gw_a, gb_a = np_k.conv3d_bwd_weights(x, gy)
    gw_c, gb_c = c_k.conv3d_bwd_weights(x, gy)
    scale = max(1.0, np.abs(gw_a).max())
    assert np.abs(gw_a - gw_c).max() < 2e-4 * scale
    assert np.abs(gb_a - gb_c).max() < 2e-4 * max(1.0, np.abs(gb_a).max())


def test_trilinear_fwd_parity():
    np_k, c_k = pair()
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(9, 9, 9, 12)).astype(np.float32)
    coords = rng.uniform(-0.5, 8.5, size=(500, 3))  # includes out-of-support
    a = np_k.trilinear_fwd(vol, coords)
    c = c_k.trilinear_fwd(vol, coords)
    assert np.abs(a - c).max() < 1e-5


def test_trilinear_bwd_parity():
    np_k, c_k = pair()
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(7, 7, 7, 5)).astype(np.float32)
    coords = rng.uniform(0.0, 6.0, size=(200, 3))
    gy = rng.normal(size=(200, 5)).astype(np.float32)
    gv_a, gc_a = np_k.trilinear_bwd(vol, coords, gy)
    gv_c, gc_c = c_k.trilinear_bwd(vol, coords, gy)
    assert np.abs(gv_a - gv_c).max() < 1e-4
    assert np.abs(gc_a - gc_c).max() < 1e-4 * max(1.0, np.abs(gc_a).max())


def test_conv_fwd_matches_brute_force():
    # independent dense oracle, tiny sizes
    for kern in pair():
        rng = np.random.default_rng(42)
        d = 3
        ci, co = 2, 3
        x = rng.normal(size=(d, d, d, ci)).astype(np.float32)
        w = rng.normal(size=(27, ci, co)).astype(np.float32)
        b = rng.normal(size=co).astype(np.float32)
        out = kern.conv3d_fwd(x, w, b)
        expect = np.zeros((d, d, d, co), np.float64) + b
        for z in range(d):
            for y in range(d):
                for xx in range(d):
                    for k in range(27):
                        dz, dy, dx = k // 9 - 1, (k // 3) % 3 - 1, k % 3 - 1
                        zz, yy, xx2 = z + dz, y + dy, xx + dx
                        if 0 <= zz < d and 0 <= yy < d and 0 <= xx2 < d:
                            expect[z, y, xx] += x[zz, yy, xx2] @ w[k]
        assert np.abs(out - expect).max() < 1e-4
