/* Hot kernels for the descriptor-field tensor library.
 *
 * The 3x3x3 convolution dominates training time.  On AVX-512 hardware the
 * inner product over (tap, in-channel) is vectorized across a 16-wide
 * output-channel block with four independent accumulators; the naive single
 * accumulator chain is FMA-latency bound and ~4x slower.  A generic scalar
 * path covers other channel counts and ISAs.
 */

#include "kernels_core.h"

#include <math.h>
#include <string.h>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

/* ---------------- conv3d forward ---------------- */

static void conv_fwd_generic(const float *restrict xpad, const float *restrict w,
                             const float *restrict b, float *restrict out,
                             long D, long H, long W, long Ci, long Co) {
    const long rowW = (W + 2) * Ci;
    const long plane = (H + 2) * (W + 2) * Ci;
    for (long z = 0; z < D; z++) {
        for (long y = 0; y < H; y++) {
            for (long x = 0; x < W; x++) {
                float *restrict dst = out + ((z * H + y) * W + x) * Co;
                for (long co = 0; co < Co; co++) dst[co] = b[co];
                for (long k = 0; k < 27; k++) {
                    const long dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
                    const float *restrict src =
                        xpad + (z + dz) * plane + (y + dy) * rowW + (x + dx) * Ci;
                    const float *restrict wk = w + k * Ci * Co;
                    for (long ci = 0; ci < Ci; ci++) {
                        const float a = src[ci];
                        const float *restrict wc = wk + ci * Co;
                        for (long co = 0; co < Co; co++) dst[co] += a * wc[co];
                    }
                }
            }
        }
    }
}

#if defined(__AVX512F__)
/* 4 output voxels per pass so each weight load feeds 4 FMAs; 2 accumulators
 * per voxel keep 8 independent FMA chains in flight. */
static void conv_fwd_avx512(const float *restrict xpad, const float *restrict w,
                            const float *restrict b, float *restrict out,
                            long D, long H, long W, long Ci, long Co) {
    const long rowW = (W + 2) * Ci;
    const long plane = (H + 2) * (W + 2) * Ci;
    const long nblk = Co / 16;
    for (long z = 0; z < D; z++)
        for (long y = 0; y < H; y++) {
            long x = 0;
            for (; x + 4 <= W; x += 4) {
                float *dst = out + ((z * H + y) * W + x) * Co;
                for (long cb = 0; cb < nblk; cb++) {
                    const __m512 bv = _mm512_loadu_ps(b + cb * 16);
                    __m512 p0 = bv, q0 = _mm512_setzero_ps();
                    __m512 p1 = bv, q1 = _mm512_setzero_ps();
                    __m512 p2 = bv, q2 = _mm512_setzero_ps();
                    __m512 p3 = bv, q3 = _mm512_setzero_ps();
                    for (long k = 0; k < 27; k++) {
                        const long dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
                        const float *src =
                            xpad + (z + dz) * plane + (y + dy) * rowW + (x + dx) * Ci;
                        const float *wk = w + (k * Ci) * Co + cb * 16;
                        long ci = 0;
                        for (; ci + 2 <= Ci; ci += 2) {
                            const __m512 w0 = _mm512_loadu_ps(wk + ci * Co);
                            const __m512 w1 = _mm512_loadu_ps(wk + (ci + 1) * Co);
                            p0 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci]), w0, p0);
                            q0 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci + 1]), w1, q0);
                            p1 = _mm512_fmadd_ps(_mm512_set1_ps(src[Ci + ci]), w0, p1);
                            q1 = _mm512_fmadd_ps(_mm512_set1_ps(src[Ci + ci + 1]), w1, q1);
                            p2 = _mm512_fmadd_ps(_mm512_set1_ps(src[2 * Ci + ci]), w0, p2);
                            q2 = _mm512_fmadd_ps(_mm512_set1_ps(src[2 * Ci + ci + 1]), w1, q2);
                            p3 = _mm512_fmadd_ps(_mm512_set1_ps(src[3 * Ci + ci]), w0, p3);
                            q3 = _mm512_fmadd_ps(_mm512_set1_ps(src[3 * Ci + ci + 1]), w1, q3);
                        }
                        for (; ci < Ci; ci++) {
                            const __m512 w0 = _mm512_loadu_ps(wk + ci * Co);
                            p0 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci]), w0, p0);
                            p1 = _mm512_fmadd_ps(_mm512_set1_ps(src[Ci + ci]), w0, p1);
                            p2 = _mm512_fmadd_ps(_mm512_set1_ps(src[2 * Ci + ci]), w0, p2);
                            p3 = _mm512_fmadd_ps(_mm512_set1_ps(src[3 * Ci + ci]), w0, p3);
                        }
                    }
                    _mm512_storeu_ps(dst + cb * 16, _mm512_add_ps(p0, q0));
                    _mm512_storeu_ps(dst + Co + cb * 16, _mm512_add_ps(p1, q1));
                    _mm512_storeu_ps(dst + 2 * Co + cb * 16, _mm512_add_ps(p2, q2));
                    _mm512_storeu_ps(dst + 3 * Co + cb * 16, _mm512_add_ps(p3, q3));
                }
            }
            for (; x < W; x++) {
                float *dst = out + ((z * H + y) * W + x) * Co;
                for (long cb = 0; cb < nblk; cb++) {
                    __m512 a0 = _mm512_loadu_ps(b + cb * 16);
                    __m512 a1 = _mm512_setzero_ps();
                    for (long k = 0; k < 27; k++) {
                        const long dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
                        const float *src =
                            xpad + (z + dz) * plane + (y + dy) * rowW + (x + dx) * Ci;
                        const float *wk = w + (k * Ci) * Co + cb * 16;
                        long ci = 0;
                        for (; ci + 2 <= Ci; ci += 2) {
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci]),
                                                 _mm512_loadu_ps(wk + ci * Co), a0);
                            a1 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci + 1]),
                                                 _mm512_loadu_ps(wk + (ci + 1) * Co), a1);
                        }
                        for (; ci < Ci; ci++)
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(src[ci]),
                                                 _mm512_loadu_ps(wk + ci * Co), a0);
                    }
                    _mm512_storeu_ps(dst + cb * 16, _mm512_add_ps(a0, a1));
                }
            }
        }
}
#endif

void df_conv3d_fwd(const float *xpad, const float *w, const float *b,
                   float *out, long D, long H, long W, long Ci, long Co) {
#if defined(__AVX512F__)
    if (Co % 16 == 0) {
        conv_fwd_avx512(xpad, w, b, out, D, H, W, Ci, Co);
        return;
    }
#endif
    conv_fwd_generic(xpad, w, b, out, D, H, W, Ci, Co);
}

/* ---------------- conv3d weight/bias gradients ---------------- */

static void conv_bwd_w_generic(const float *restrict xpad, const float *restrict gy,
                               float *restrict gw, float *restrict gb,
                               long D, long H, long W, long Ci, long Co) {
    const long rowW = (W + 2) * Ci;
    const long plane = (H + 2) * (W + 2) * Ci;
    for (long z = 0; z < D; z++)
        for (long y = 0; y < H; y++) {
            const float *restrict gyrow = gy + (z * H + y) * W * Co;
            for (long k = 0; k < 27; k++) {
                const long dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
                const float *restrict src =
                    xpad + (z + dz) * plane + (y + dy) * rowW + dx * Ci;
                float *restrict gwk = gw + k * Ci * Co;
                for (long x = 0; x < W; x++) {
                    const float *restrict s = src + x * Ci;
                    const float *restrict g = gyrow + x * Co;
                    for (long ci = 0; ci < Ci; ci++) {
                        const float a = s[ci];
                        float *restrict dstw = gwk + ci * Co;
                        for (long co = 0; co < Co; co++) dstw[co] += a * g[co];
                    }
                }
            }
            for (long x = 0; x < W; x++)
                for (long co = 0; co < Co; co++) gb[co] += gyrow[x * Co + co];
        }
}

#if defined(__AVX512F__)
/* 4 input channels per pass so each gy load feeds 4 FMA chains. */
static void conv_bwd_w_avx512(const float *restrict xpad, const float *restrict gy,
                              float *restrict gw, float *restrict gb,
                              long D, long H, long W, long Ci, long Co) {
    const long rowW = (W + 2) * Ci;
    const long plane = (H + 2) * (W + 2) * Ci;
    const long nblk = Co / 16;
    for (long z = 0; z < D; z++)
        for (long y = 0; y < H; y++) {
            const float *gyrow = gy + (z * H + y) * W * Co;
            for (long k = 0; k < 27; k++) {
                const long dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
                const float *src =
                    xpad + (z + dz) * plane + (y + dy) * rowW + dx * Ci;
                float *gwk = gw + k * Ci * Co;
                for (long cb = 0; cb < nblk; cb++) {
                    long ci = 0;
                    for (; ci + 4 <= Ci; ci += 4) {
                        __m512 a0 = _mm512_setzero_ps();
                        __m512 a1 = _mm512_setzero_ps();
                        __m512 a2 = _mm512_setzero_ps();
                        __m512 a3 = _mm512_setzero_ps();
                        for (long x = 0; x < W; x++) {
                            const __m512 g = _mm512_loadu_ps(gyrow + x * Co + cb * 16);
                            const float *s = src + x * Ci + ci;
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(s[0]), g, a0);
                            a1 = _mm512_fmadd_ps(_mm512_set1_ps(s[1]), g, a1);
                            a2 = _mm512_fmadd_ps(_mm512_set1_ps(s[2]), g, a2);
                            a3 = _mm512_fmadd_ps(_mm512_set1_ps(s[3]), g, a3);
                        }
                        float *d0 = gwk + ci * Co + cb * 16;
                        _mm512_storeu_ps(d0, _mm512_add_ps(_mm512_loadu_ps(d0), a0));
                        float *d1 = gwk + (ci + 1) * Co + cb * 16;
                        _mm512_storeu_ps(d1, _mm512_add_ps(_mm512_loadu_ps(d1), a1));
                        float *d2 = gwk + (ci + 2) * Co + cb * 16;
                        _mm512_storeu_ps(d2, _mm512_add_ps(_mm512_loadu_ps(d2), a2));
                        float *d3 = gwk + (ci + 3) * Co + cb * 16;
                        _mm512_storeu_ps(d3, _mm512_add_ps(_mm512_loadu_ps(d3), a3));
                    }
                    for (; ci < Ci; ci++) {
                        __m512 a0 = _mm512_setzero_ps();
                        __m512 a1 = _mm512_setzero_ps();
                        long x = 0;
                        for (; x + 2 <= W; x += 2) {
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(src[x * Ci + ci]),
                                                 _mm512_loadu_ps(gyrow + x * Co + cb * 16), a0);
                            a1 = _mm512_fmadd_ps(_mm512_set1_ps(src[(x + 1) * Ci + ci]),
                                                 _mm512_loadu_ps(gyrow + (x + 1) * Co + cb * 16), a1);
                        }
                        for (; x < W; x++)
                            a0 = _mm512_fmadd_ps(_mm512_set1_ps(src[x * Ci + ci]),
                                                 _mm512_loadu_ps(gyrow + x * Co + cb * 16), a0);
                        float *dstw = gwk + ci * Co + cb * 16;
                        _mm512_storeu_ps(dstw,
                                         _mm512_add_ps(_mm512_loadu_ps(dstw),
                                                       _mm512_add_ps(a0, a1)));
                    }
                }
            }
            for (long x = 0; x < W; x++)
                for (long co = 0; co < Co; co++) gb[co] += gyrow[x * Co + co];
        }
}
#endif

void df_conv3d_bwd_w(const float *xpad, const float *gy,
                     float *gw, float *gb,
                     long D, long H, long W, long Ci, long Co) {
    memset(gw, 0, (size_t)(27 * Ci * Co) * sizeof(float));
    memset(gb, 0, (size_t)Co * sizeof(float));
#if defined(__AVX512F__)
    if (Co % 16 == 0) {
        conv_bwd_w_avx512(xpad, gy, gw, gb, D, H, W, Ci, Co);
        return;
    }
#endif
    conv_bwd_w_generic(xpad, gy, gw, gb, D, H, W, Ci, Co);
}

/* ---------------- trilinear gather ---------------- */

static void corner_setup(const double *restrict uc, long D, long H, long W,
                         long *restrict i0, double *restrict f, int *restrict cl) {
    const double dims[3] = {(double)(D - 1), (double)(H - 1), (double)(W - 1)};
    const long hi[3] = {D - 2, H - 2, W - 2};
    for (int a = 0; a < 3; a++) {
        double u = uc[a];
        cl[a] = (u <= 0.0) || (u >= dims[a]);
        if (u < 0.0) u = 0.0;
        if (u > dims[a]) u = dims[a];
        long i = (long)floor(u);
        if (i > hi[a]) i = hi[a];
        if (i < 0) i = 0;
        i0[a] = i;
        f[a] = u - (double)i;
    }
}

void df_trilinear_fwd(const float *vol, const double *coords, float *out,
                      long N, long D, long H, long W, long C) {
    for (long n = 0; n < N; n++) {
        long i0[3];
        double f[3];
        int cl[3];
        corner_setup(coords + n * 3, D, H, W, i0, f, cl);
        float *restrict o = out + n * C;
        for (long c = 0; c < C; c++) o[c] = 0.0f;
        for (int cz = 0; cz < 2; cz++) {
            const double wz = cz ? f[0] : 1.0 - f[0];
            for (int cy = 0; cy < 2; cy++) {
                const double wy = cy ? f[1] : 1.0 - f[1];
                for (int cx = 0; cx < 2; cx++) {
                    const double wx = cx ? f[2] : 1.0 - f[2];
                    const float wgt = (float)(wz * wy * wx);
                    const float *restrict v =
                        vol + (((i0[0] + cz) * H + i0[1] + cy) * W + i0[2] + cx) * C;
                    for (long c = 0; c < C; c++) o[c] += v[c] * wgt;
                }
            }
        }
    }
}

void df_trilinear_bwd(const float *vol, const double *coords, const float *gy,
                      float *gvol, double *gcoords,
                      long N, long D, long H, long W, long C) {
    for (long n = 0; n < N; n++) {
        long i0[3];
        double f[3];
        int cl[3];
        corner_setup(coords + n * 3, D, H, W, i0, f, cl);
        const float *restrict g = gy + n * C;
        double gc[3] = {0.0, 0.0, 0.0};
        for (int cz = 0; cz < 2; cz++) {
            const double wz = cz ? f[0] : 1.0 - f[0];
            const double dz = cz ? 1.0 : -1.0;
            for (int cy = 0; cy < 2; cy++) {
                const double wy = cy ? f[1] : 1.0 - f[1];
                const double dy = cy ? 1.0 : -1.0;
                for (int cx = 0; cx < 2; cx++) {
                    const double wx = cx ? f[2] : 1.0 - f[2];
                    const double dx = cx ? 1.0 : -1.0;
                    const long lin = (((i0[0] + cz) * H + i0[1] + cy) * W + i0[2] + cx) * C;
                    const float wgt = (float)(wz * wy * wx);
                    float *restrict gv = gvol + lin;
                    const float *restrict v = vol + lin;
                    double dot = 0.0;
                    for (long c = 0; c < C; c++) {
                        gv[c] += g[c] * wgt;
                        dot += (double)v[c] * (double)g[c];
                    }
                    gc[0] += dz * wy * wx * dot;
                    gc[1] += wz * dy * wx * dot;
                    gc[2] += wz * wy * dx * dot;
                }
            }
        }
        for (int a = 0; a < 3; a++) gcoords[n * 3 + a] = cl[a] ? 0.0 : gc[a];
    }
}
