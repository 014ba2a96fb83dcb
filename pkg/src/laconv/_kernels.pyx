# cython: language_level=3
"""Compiled loop nests for the hottest kernels.

Every kernel accepts float32 or float64 C-contiguous arrays and mirrors the
numpy reference in :mod:`laconv.kernels`.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef extern from "_bn.h" nogil:
    int bn_fwd_f32(const float* x, const float* res, const float* gamma, const float* beta, float* y,
                   double* mean, double* var, double* inv, Py_ssize_t N, Py_ssize_t C, double eps, int relu)
    int bn_fwd_f64(const double* x, const double* res, const double* gamma, const double* beta, double* y,
                   double* mean, double* var, double* inv, Py_ssize_t N, Py_ssize_t C, double eps, int relu)
    int bn_bwd_f32(const float* gout, const float* x, const float* y, const float* gamma, const double* mean,
                   const double* inv, float* dx, float* gp, double* dgamma, double* dbeta, Py_ssize_t N, Py_ssize_t C)
    int bn_bwd_f64(const double* gout, const double* x, const double* y, const double* gamma, const double* mean,
                   const double* inv, double* dx, double* gp, double* dgamma, double* dbeta, Py_ssize_t N, Py_ssize_t C)


cdef extern from "_dyconv.h" nogil:
    int dyconv_fwd_f32(const float* x, const float* w, float* out, Py_ssize_t B, Py_ssize_t H,
                       Py_ssize_t W, Py_ssize_t D, int k, Py_ssize_t g, Py_ssize_t s)
    int dyconv_fwd_f64(const double* x, const double* w, double* out, Py_ssize_t B, Py_ssize_t H,
                       Py_ssize_t W, Py_ssize_t D, int k, Py_ssize_t g, Py_ssize_t s)
    int dyconv_bwd_f32(const float* x, const float* w, const float* gout, float* dx, float* dw,
                       Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t D, int k, Py_ssize_t g, Py_ssize_t s)
    int dyconv_bwd_f64(const double* x, const double* w, const double* gout, double* dx, double* dw,
                       Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t D, int k, Py_ssize_t g, Py_ssize_t s)


cdef extern from "_pool.h" nogil:
    void maxpool_fwd_f32(const float* x, float* out, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C)
    void maxpool_fwd_f64(const double* x, double* out, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C)
    void maxpool_bwd_f32(const float* gout, const float* x, const float* out, float* dx, Py_ssize_t B,
                         Py_ssize_t H, Py_ssize_t W, Py_ssize_t C)
    void maxpool_bwd_f64(const double* gout, const double* x, const double* out, double* dx, Py_ssize_t B,
                         Py_ssize_t H, Py_ssize_t W, Py_ssize_t C)


def dyconv_forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w, int k, int g, int s=1):
    """out[b,i,j,c] = sum_{di,dj} x[b,i+di-p,j+dj-p,c] * w[b,i//s,j//s,(di*k+dj)*g + c//cg]."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3]
    cdef int rc = 0
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, H, W, D), dtype=dtype)
    if out_arr.size == 0:
        return out_arr
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        if floating is float:
            rc = dyconv_fwd_f32(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0], B, H, W, D, k, g, s)
        else:
            rc = dyconv_fwd_f64(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0], B, H, W, D, k, g, s)
    if rc:
        raise MemoryError()
    return out_arr


def dyconv_backward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w,
                    const floating[:, :, :, ::1] gout, int k, int g, int s=1):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3]
    cdef int rc = 0
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((B, H, W, D), dtype=dtype)
    dw_arr = np.zeros((B, H // s, W // s, w.shape[3]), dtype=dtype)
    if dx_arr.size == 0:
        return dx_arr, dw_arr
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[:, :, :, ::1] dw = dw_arr
    with nogil:
        if floating is float:
            rc = dyconv_bwd_f32(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &gout[0, 0, 0, 0],
                                &dx[0, 0, 0, 0], &dw[0, 0, 0, 0], B, H, W, D, k, g, s)
        else:
            rc = dyconv_bwd_f64(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &gout[0, 0, 0, 0],
                                &dx[0, 0, 0, 0], &dw[0, 0, 0, 0], B, H, W, D, k, g, s)
    if rc:
        raise MemoryError()
    return dx_arr, dw_arr


def bn_forward(const floating[:, ::1] x, const floating[::1] gamma, const floating[::1] beta, double eps,
               residual=None, bint relu=False):
    """Training-mode batch norm over rows, optionally + residual then relu.

    Returns (y, mean, var, inv_std); statistics are float64.
    """
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    if N < 1:
        raise ValueError("batch norm needs at least one row")
    dtype = np.float32 if floating is float else np.float64
    cdef const floating[:, ::1] res
    cdef const floating* rp = NULL
    if residual is not None:
        res = residual
        rp = &res[0, 0]
    mean_arr = np.empty(C, dtype=np.float64)
    var_arr = np.empty(C, dtype=np.float64)
    inv_arr = np.empty(C, dtype=np.float64)
    y_arr = np.empty((N, C), dtype=dtype)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double[::1] inv = inv_arr
    cdef floating[:, ::1] y = y_arr
    cdef int rc
    with nogil:
        if floating is float:
            rc = bn_fwd_f32(&x[0, 0], rp, &gamma[0], &beta[0], &y[0, 0], &mean[0], &var[0], &inv[0], N, C, eps, relu)
        else:
            rc = bn_fwd_f64(&x[0, 0], rp, &gamma[0], &beta[0], &y[0, 0], &mean[0], &var[0], &inv[0], N, C, eps, relu)
    if rc:
        raise MemoryError()
    return y_arr, mean_arr, var_arr, inv_arr


def bn_backward(const floating[:, ::1] gout, const floating[:, ::1] x, y, const floating[::1] gamma,
                const double[::1] mean, const double[::1] inv):
    """Gradients of :func:`bn_forward`; pass the forward output as ``y`` when relu was applied.

    Returns (dx, dgamma, dbeta, g_pre) where g_pre is the gradient reaching the
    pre-activation sum, which is also the residual's gradient (None without relu).
    """
    cdef Py_ssize_t N = gout.shape[0], C = gout.shape[1]
    dtype = np.float32 if floating is float else np.float64
    cdef const floating[:, ::1] yv
    cdef const floating* yp = NULL
    cdef floating* gpp = NULL
    cdef floating[:, ::1] gp
    gp_arr = None
    if y is not None:
        yv = y
        yp = &yv[0, 0]
        gp_arr = np.empty((N, C), dtype=dtype)
        gp = gp_arr
        gpp = &gp[0, 0]
    dx_arr = np.empty((N, C), dtype=dtype)
    dg_arr = np.empty(C, dtype=np.float64)
    db_arr = np.empty(C, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef int rc
    with nogil:
        if floating is float:
            rc = bn_bwd_f32(&gout[0, 0], &x[0, 0], yp, &gamma[0], &mean[0], &inv[0], &dx[0, 0], gpp,
                            &dg[0], &db[0], N, C)
        else:
            rc = bn_bwd_f64(&gout[0, 0], &x[0, 0], yp, &gamma[0], &mean[0], &inv[0], &dx[0, 0], gpp,
                            &dg[0], &db[0], N, C)
    if rc:
        raise MemoryError()
    return dx_arr, dg_arr.astype(dtype), db_arr.astype(dtype), gp_arr


def maxpool_forward(const floating[:, :, :, ::1] x):
    """2x2 stride-2 max pool."""
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"max pool needs even spatial dims, got {x.shape[1]}x{x.shape[2]}")
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1] // 2, W = x.shape[2] // 2, C = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, H, W, C), dtype=dtype)
    if out_arr.size == 0:
        return out_arr
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        if floating is float:
            maxpool_fwd_f32(&x[0, 0, 0, 0], &out[0, 0, 0, 0], B, H, W, C)
        else:
            maxpool_fwd_f64(&x[0, 0, 0, 0], &out[0, 0, 0, 0], B, H, W, C)
    return out_arr


def maxpool_backward(const floating[:, :, :, ::1] gout, const floating[:, :, :, ::1] x,
                     const floating[:, :, :, ::1] out):
    """Route each output gradient to the first input in its window equal to the output."""
    cdef Py_ssize_t B = gout.shape[0], H = gout.shape[1], W = gout.shape[2], C = gout.shape[3]
    if (x.shape[0] != B or x.shape[1] != 2 * H or x.shape[2] != 2 * W or x.shape[3] != C
            or out.shape[0] != B or out.shape[1] != H or out.shape[2] != W or out.shape[3] != C):
        raise ValueError("max pool backward: shapes of gout, x and out disagree")
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((B, 2 * H, 2 * W, C), dtype=dtype)
    if dx_arr.size == 0:
        return dx_arr
    cdef floating[:, :, :, ::1] dx = dx_arr
    with nogil:
        if floating is float:
            maxpool_bwd_f32(&gout[0, 0, 0, 0], &x[0, 0, 0, 0], &out[0, 0, 0, 0], &dx[0, 0, 0, 0], B, H, W, C)
        else:
            maxpool_bwd_f64(&gout[0, 0, 0, 0], &x[0, 0, 0, 0], &out[0, 0, 0, 0], &dx[0, 0, 0, 0], B, H, W, C)
    return dx_arr
