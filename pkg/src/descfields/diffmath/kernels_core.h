#ifndef DESCFIELDS_KERNELS_CORE_H
#define DESCFIELDS_KERNELS_CORE_H

#include <stddef.h>

/* All volumes are channels-last contiguous float32.
 * conv inputs are pre-padded by one voxel on each spatial side. */

void df_conv3d_fwd(const float *xpad, const float *w, const float *b,
                   float *out, long D, long H, long W, long Ci, long Co);

void df_conv3d_bwd_w(const float *xpad, const float *gy,
                     float *gw, float *gb,
                     long D, long H, long W, long Ci, long Co);

void df_trilinear_fwd(const float *vol, const double *coords, float *out,
                      long N, long D, long H, long W, long C);

void df_trilinear_bwd(const float *vol, const double *coords, const float *gy,
                      float *gvol, double *gcoords,
                      long N, long D, long H, long W, long C);

#endif
