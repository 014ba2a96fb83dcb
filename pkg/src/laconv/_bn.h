/* Training-mode batch norm over the rows of an (N, C) array, with an optional
 * residual added after the affine map and an optional relu on the result.
 *
 * Statistics accumulate in double around a per-channel shift (the first row),
 * which keeps the one-pass variance well conditioned. The per-element passes
 * use per-channel coefficients folded into T so they vectorize; x is taken
 * relative to the shift there too, so a large mean does not cancel. The relu
 * passes NaN through, like np.maximum, so non-finite values stay visible.
 */
#ifndef LACONV_BN_H
#define LACONV_BN_H

#include <math.h>
#include <stddef.h>
#include <stdlib.h>
#include <string.h>

#define LACONV_BN_DEFINE(T, SUF)                                                     \
static int bn_fwd_##SUF(const T *restrict x, const T *restrict res,                  \
        const T *restrict gamma, const T *restrict beta, T *restrict y,              \
        double *restrict mean, double *restrict var, double *restrict inv,           \
        ptrdiff_t N, ptrdiff_t C, double eps, int relu) {                            \
    double *restrict s1 = (double *)calloc(2 * C, sizeof(double));                   \
    T *restrict coef = (T *)malloc(3 * C * sizeof(T));                               \
    if (!s1 || !coef) { free(s1); free(coef); return -1; }                           \
    double *restrict s2 = s1 + C;                                                    \
    T *restrict shift = coef, *restrict scale = coef + C, *restrict offs = coef + 2 * C; \
    for (ptrdiff_t c = 0; c < C; c++) shift[c] = x[c];                               \
    for (ptrdiff_t n = 0; n < N; n++) {                                              \
        const T *restrict xr = x + n * C;                                            \
        for (ptrdiff_t c = 0; c < C; c++) {                                          \
            const double d = (double)(xr[c] - shift[c]);                             \
            s1[c] += d;                                                              \
            s2[c] += d * d;                                                          \
        }                                                                            \
    }                                                                                \
    for (ptrdiff_t c = 0; c < C; c++) {                                              \
        const double m = s1[c] / N;                                                  \
        double v = s2[c] / N - m * m;                                                \
        if (v < 0) v = 0;                                                            \
        mean[c] = m + shift[c];                                                      \
        var[c] = v;                                                                  \
        inv[c] = 1.0 / sqrt(v + eps);                                                \
        scale[c] = (T)(gamma[c] * inv[c]);                                           \
        offs[c] = (T)(beta[c] - m * gamma[c] * inv[c]);                              \
    }                                                                                \
    for (ptrdiff_t n = 0; n < N; n++) {                                              \
        const T *restrict xr = x + n * C;                                            \
        T *restrict yr = y + n * C;                                                  \
        if (res) {                                                                   \
            const T *restrict rr = res + n * C;                                      \
            for (ptrdiff_t c = 0; c < C; c++)                                        \
                yr[c] = (xr[c] - shift[c]) * scale[c] + offs[c] + rr[c];             \
        } else {                                                                     \
            for (ptrdiff_t c = 0; c < C; c++)                                        \
                yr[c] = (xr[c] - shift[c]) * scale[c] + offs[c];                     \
        }                                                                            \
        if (relu)                                                                    \
            for (ptrdiff_t c = 0; c < C; c++) yr[c] = yr[c] < 0 ? (T)0 : yr[c];      \
    }                                                                                \
    free(s1);                                                                        \
    free(coef);                                                                      \
    return 0;                                                                        \
}                                                                                    \
                                                                                     \
/* y != NULL means relu was applied: gradients are masked by y > 0 first and  */    \
/* the masked gradient is written to gp (the residual's gradient).             */   \
static int bn_bwd_##SUF(const T *restrict gout, const T *restrict x,                 \
        const T *restrict y, const T *restrict gamma, const double *restrict mean,   \
        const double *restrict inv, T *restrict dx, T *restrict gp,                  \
        double *restrict dgamma, double *restrict dbeta, ptrdiff_t N, ptrdiff_t C) { \
    double *restrict s1 = (double *)calloc(2 * C, sizeof(double));                   \
    T *restrict coef = (T *)malloc(4 * C * sizeof(T));                               \
    if (!s1 || !coef) { free(s1); free(coef); return -1; }                           \
    double *restrict s2 = s1 + C;                                                    \
    T *restrict shift = coef, *restrict ca = coef + C, *restrict cb = coef + 2 * C;  \
    T *restrict cc = coef + 3 * C;                                                   \
    for (ptrdiff_t c = 0; c < C; c++) shift[c] = (T)mean[c];                         \
    for (ptrdiff_t n = 0; n < N; n++) {                                              \
        const T *restrict gr = gout + n * C;                                         \
        const T *restrict xr = x + n * C;                                            \
        if (y) {                                                                     \
            const T *restrict yr = y + n * C;                                        \
            T *restrict pr = gp + n * C;                                             \
            for (ptrdiff_t c = 0; c < C; c++) pr[c] = yr[c] > 0 ? gr[c] : (T)0;      \
            gr = pr;                                                                 \
        }                                                                            \
        for (ptrdiff_t c = 0; c < C; c++) {                                          \
            s1[c] += (double)gr[c];                                                  \
            s2[c] += (double)(gr[c] * (xr[c] - shift[c]));                           \
        }                                                                            \
    }                                                                                \
    for (ptrdiff_t c = 0; c < C; c++) {                                              \
        /* x - mean differs from x - shift by the rounding of mean to T */           \
        const double corr = (double)shift[c] - mean[c];                              \
        const double sgx = (s2[c] + corr * s1[c]) * inv[c];                          \
        const double sc = gamma[c] * inv[c];                                         \
        const double mg = s1[c] / N, mgx = sgx / N;                                  \
        dgamma[c] = sgx;                                                             \
        dbeta[c] = s1[c];                                                            \
        ca[c] = (T)sc;                                                               \
        cb[c] = (T)(-sc * inv[c] * mgx);                                             \
        cc[c] = (T)(-sc * inv[c] * mgx * corr - sc * mg);                            \
    }                                                                                \
    for (ptrdiff_t n = 0; n < N; n++) {                                              \
        const T *restrict gr = (y ? gp : gout) + n * C;                              \
        const T *restrict xr = x + n * C;                                            \
        T *restrict dr = dx + n * C;                                                 \
        for (ptrdiff_t c = 0; c < C; c++)                                            \
            dr[c] = ca[c] * gr[c] + cb[c] * (xr[c] - shift[c]) + cc[c];              \
    }                                                                                \
    free(s1);                                                                        \
    free(coef);                                                                      \
    return 0;                                                                        \
}

LACONV_BN_DEFINE(float, f32)
LACONV_BN_DEFINE(double, f64)

#endif
