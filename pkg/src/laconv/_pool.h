/* 2x2 stride-2 max pool over (B, H, W, C) channels-last arrays.
 *
 * Nothing but the pooled output is kept for backward: the winner of each
 * window is recovered by comparing the four inputs with it (first match wins,
 * position 0 when nothing matches, which is what a NaN at position 0 gives).
 * Storing an int8 argmax instead cost ~8x the forward time because the mask
 * narrowing would not vectorize. All comparisons are selects, not branches.
 */
#ifndef LACONV_POOL_H
#define LACONV_POOL_H

#include <stddef.h>

#define LACONV_POOL_DEFINE(T, SUF)                                                   \
static void maxpool_fwd_##SUF(const T *restrict x, T *restrict out,                  \
        ptrdiff_t B, ptrdiff_t H, ptrdiff_t W, ptrdiff_t C) {                        \
    for (ptrdiff_t b = 0; b < B; b++)                                                \
    for (ptrdiff_t i = 0; i < H; i++)                                                \
    for (ptrdiff_t j = 0; j < W; j++) {                                              \
        const T *restrict r0 = x + ((b * 2 * H + 2 * i) * 2 * W + 2 * j) * C;        \
        const T *restrict r1 = r0 + 2 * W * C;                                       \
        T *restrict o = out + ((b * H + i) * W + j) * C;                             \
        for (ptrdiff_t c = 0; c < C; c++) {                                          \
            T best = r0[c], v;                                                       \
            v = r0[C + c]; best = v > best ? v : best;                               \
            v = r1[c];     best = v > best ? v : best;                               \
            v = r1[C + c]; best = v > best ? v : best;                               \
            o[c] = best;                                                             \
        }                                                                            \
    }                                                                                \
}                                                                                    \
                                                                                     \
/* dx is (B, 2H, 2W, C) and is fully overwritten. */                                \
static void maxpool_bwd_##SUF(const T *restrict gout, const T *restrict x,           \
        const T *restrict out, T *restrict dx, ptrdiff_t B, ptrdiff_t H, ptrdiff_t W, \
        ptrdiff_t C) {                                                               \
    for (ptrdiff_t b = 0; b < B; b++)                                                \
    for (ptrdiff_t i = 0; i < H; i++)                                                \
    for (ptrdiff_t j = 0; j < W; j++) {                                              \
        const ptrdiff_t top = ((b * 2 * H + 2 * i) * 2 * W + 2 * j) * C;             \
        const ptrdiff_t bot = top + 2 * W * C, p = ((b * H + i) * W + j) * C;        \
        for (ptrdiff_t c = 0; c < C; c++) {                                          \
            const T o = out[p + c], g = gout[p + c];                                 \
            const int e0 = x[top + c] == o, e1 = x[top + C + c] == o;                \
            const int e2 = x[bot + c] == o, e3 = x[bot + C + c] == o;                \
            const int w1 = !e0 & e1, w2 = !e0 & !e1 & e2, w3 = !e0 & !e1 & !e2 & e3; \
            dx[top + c] = (w1 | w2 | w3) ? (T)0 : g;                                 \
            dx[top + C + c] = w1 ? g : (T)0;                                         \
            dx[bot + c] = w2 ? g : (T)0;                                             \
            dx[bot + C + c] = w3 ? g : (T)0;                                         \
        }                                                                            \
    }                                                                                \
}

LACONV_POOL_DEFINE(float, f32)
LACONV_POOL_DEFINE(double, f64)

#endif
