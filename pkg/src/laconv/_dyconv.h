/* Dynamic depth-wise convolution loop nests.
 *
 * x, out: (B, H, W, D) channels-last. w: (B, H/s, W/s, k*k*g), last axis laid
 * out as (di, dj, group); position (i, j) uses the kernel stored at
 * (i/s, j/s). Zero padding, stride 1, taps centred at k/2. Channel c belongs
 * to group c / (D/g).
 *
 * Each kernel is first expanded to one weight per (tap, channel) so the inner
 * loops run over D contiguous channels. The expansion is reused by the s*s
 * positions sharing the kernel. Backward accumulates per-channel products for
 * a whole cell, then reduces them over each group's channels once.
 */
#ifndef LACONV_DYCONV_H
#define LACONV_DYCONV_H

#include <stddef.h>
#include <stdlib.h>
#include <string.h>

#define LACONV_DEFINE(T, SUF)                                                        \
static int dyconv_fwd_##SUF(const T *restrict x, const T *restrict w,                \
        T *restrict out, ptrdiff_t B, ptrdiff_t H, ptrdiff_t W, ptrdiff_t D,         \
        int k, ptrdiff_t g, ptrdiff_t s) {                                           \
    const ptrdiff_t p = k / 2, taps = (ptrdiff_t)k * k, KW = taps * g;               \
    const ptrdiff_t cg = D / g, Hs = H / s, Ws = W / s;                              \
    T *wexp = (T *)malloc(sizeof(T) * taps * D);                                     \
    if (!wexp) return -1;                                                            \
    for (ptrdiff_t b = 0; b < B; b++)                                                \
    for (ptrdiff_t ci = 0; ci < Hs; ci++)                                            \
    for (ptrdiff_t cj = 0; cj < Ws; cj++) {                                          \
        const T *wr = w + ((b * Hs + ci) * Ws + cj) * KW;                            \
        for (ptrdiff_t t = 0; t < taps; t++)                                         \
            for (ptrdiff_t gr = 0; gr < g; gr++)                                     \
                for (ptrdiff_t c = 0; c < cg; c++)                                   \
                    wexp[t * D + gr * cg + c] = wr[t * g + gr];                      \
        for (ptrdiff_t i = ci * s; i < ci * s + s; i++)                              \
        for (ptrdiff_t j = cj * s; j < cj * s + s; j++) {                            \
            T *restrict acc = out + ((b * H + i) * W + j) * D;                       \
            for (ptrdiff_t di = 0; di < k; di++) {                                   \
                const ptrdiff_t ii = i + di - p;                                     \
                if (ii < 0 || ii >= H) continue;                                     \
                for (ptrdiff_t dj = 0; dj < k; dj++) {                               \
                    const ptrdiff_t jj = j + dj - p;                                 \
                    if (jj < 0 || jj >= W) continue;                                 \
                    const T *restrict xr = x + ((b * H + ii) * W + jj) * D;          \
                    const T *restrict we = wexp + (di * k + dj) * D;                 \
                    for (ptrdiff_t c = 0; c < D; c++)                                \
                        acc[c] += xr[c] * we[c];                                     \
                }                                                                    \
            }                                                                        \
        }                                                                            \
    }                                                                                \
    free(wexp);                                                                      \
    return 0;                                                                        \
}                                                                                    \
                                                                                     \
static int dyconv_bwd_##SUF(const T *restrict x, const T *restrict w,                \
        const T *restrict gout, T *restrict dx, T *restrict dw, ptrdiff_t B,         \
        ptrdiff_t H, ptrdiff_t W, ptrdiff_t D, int k, ptrdiff_t g, ptrdiff_t s) {    \
    const ptrdiff_t p = k / 2, taps = (ptrdiff_t)k * k, KW = taps * g;               \
    const ptrdiff_t cg = D / g, Hs = H / s, Ws = W / s;                              \
    T *wexp = (T *)malloc(sizeof(T) * taps * D);                                     \
    T *dwexp = (T *)malloc(sizeof(T) * taps * D);                                    \
    if (!wexp || !dwexp) { free(wexp); free(dwexp); return -1; }                     \
    for (ptrdiff_t b = 0; b < B; b++)                                                \
    for (ptrdiff_t ci = 0; ci < Hs; ci++)                                            \
    for (ptrdiff_t cj = 0; cj < Ws; cj++) {                                          \
        const T *wr = w + ((b * Hs + ci) * Ws + cj) * KW;                            \
        T *dwr = dw + ((b * Hs + ci) * Ws + cj) * KW;                                \
        for (ptrdiff_t t = 0; t < taps; t++)                                         \
            for (ptrdiff_t gr = 0; gr < g; gr++)                                     \
                for (ptrdiff_t c = 0; c < cg; c++)                                   \
                    wexp[t * D + gr * cg + c] = wr[t * g + gr];                      \
        memset(dwexp, 0, sizeof(T) * taps * D);                                      \
        for (ptrdiff_t i = ci * s; i < ci * s + s; i++)                              \
        for (ptrdiff_t j = cj * s; j < cj * s + s; j++) {                            \
            const T *restrict go = gout + ((b * H + i) * W + j) * D;                 \
            for (ptrdiff_t di = 0; di < k; di++) {                                   \
                const ptrdiff_t ii = i + di - p;                                     \
                if (ii < 0 || ii >= H) continue;                                     \
                for (ptrdiff_t dj = 0; dj < k; dj++) {                               \
                    const ptrdiff_t jj = j + dj - p;                                 \
                    if (jj < 0 || jj >= W) continue;                                 \
                    const ptrdiff_t nb = ((b * H + ii) * W + jj) * D;                \
                    const T *restrict xr = x + nb;                                   \
                    T *restrict dxr = dx + nb;                                       \
                    const T *restrict we = wexp + (di * k + dj) * D;                 \
                    T *restrict dwe = dwexp + (di * k + dj) * D;                     \
                    for (ptrdiff_t c = 0; c < D; c++) {                              \
                        dxr[c] += go[c] * we[c];                                     \
                        dwe[c] += go[c] * xr[c];                                     \
                    }                                                                \
                }                                                                    \
            }                                                                        \
        }                                                                            \
        for (ptrdiff_t t = 0; t < taps; t++)                                         \
            for (ptrdiff_t gr = 0; gr < g; gr++) {                                   \
                T acc = 0;                                                           \
                for (ptrdiff_t c = gr * cg; c < gr * cg + cg; c++)                   \
                    acc += dwexp[t * D + c];                                         \
                dwr[t * g + gr] = acc;                                               \
            }                                                                        \
    }                                                                                \
    free(wexp);                                                                      \
    free(dwexp);                                                                     \
    return 0;                                                                        \
}

LACONV_DEFINE(float, f32)
LACONV_DEFINE(double, f64)

#endif
