# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of kernels._reference.

Matrix products go through BLAS dgemm (scipy's exported capsule); the
elementwise kernels are plain C loops.  Same contract as the reference:
float64 C-contiguous arrays, 2-D for affine/matmul/softmax.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log, tanh as c_tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void gemm_rm(char opa, char opb, double alpha,
                         double[:, ::1] a, double[:, ::1] b,
                         double beta, double[:, ::1] c) noexcept nogil:
    # Row-major c = alpha*op(a) @ op(b) + beta*c via the column-major swap:
    # c^T = op(b)^T @ op(a)^T, so b is handed to dgemm first.
    cdef int m = <int> c.shape[1]
    cdef int n = <int> c.shape[0]
    cdef int k = <int> (a.shape[1] if opa == b'n' else a.shape[0])
    cdef int lda = <int> b.shape[1]
    cdef int ldb = <int> a.shape[1]
    cdef int ldc = <int> c.shape[1]
    cdef char fa = b'n' if opb == b'n' else b't'
    cdef char fb = b'n' if opa == b'n' else b't'
    dgemm(&fa, &fb, &m, &n, &k, &alpha, &b[0, 0], &lda, &a[0, 0], &ldb,
          &beta, &c[0, 0], &ldc)


def affine_forward(cnp.ndarray x, cnp.ndarray w, cnp.ndarray b):
    cdef cnp.ndarray out = np.empty((x.shape[0], w.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] bv = b
    cdef Py_ssize_t i, j
    for i in range(ov.shape[0]):
        for j in range(ov.shape[1]):
            ov[i, j] = bv[j]
    gemm_rm(b'n', b'n', 1.0, x, w, 1.0, ov)
    return out


def affine_backward(cnp.ndarray x, cnp.ndarray w, cnp.ndarray gy):
    cdef cnp.ndarray gx = np.empty_like(x)
    cdef cnp.ndarray gw = np.empty_like(w)
    cdef cnp.ndarray gb = np.empty(gy.shape[1], dtype=np.float64)
    gemm_rm(b'n', b't', 1.0, gy, w, 0.0, gx)
    gemm_rm(b't', b'n', 1.0, x, gy, 0.0, gw)
    cdef double[:, ::1] gyv = gy
    cdef double[::1] gbv = gb
    cdef Py_ssize_t i, j
    cdef double acc
    for j in range(gyv.shape[1]):
        acc = 0.0
        for i in range(gyv.shape[0]):
            acc += gyv[i, j]
        gbv[j] = acc
    return gx, gw, gb


def matmul_forward(cnp.ndarray a, cnp.ndarray b):
    cdef cnp.ndarray out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    gemm_rm(b'n', b'n', 1.0, a, b, 0.0, out)
    return out


def matmul_backward(cnp.ndarray a, cnp.ndarray b, cnp.ndarray gy):
    cdef cnp.ndarray ga = np.empty_like(a)
    cdef cnp.ndarray gb = np.empty_like(b)
    gemm_rm(b'n', b't', 1.0, gy, b, 0.0, ga)
    gemm_rm(b't', b'n', 1.0, a, gy, 0.0, gb)
    return ga, gb


cdef void _tanh1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_tanh(x[i])


cdef void _tanh1d_bwd(double[::1] y, double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        out[i] = gy[i] * (1.0 - y[i] * y[i])


cdef void _sigmoid1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double e
    for i in range(x.shape[0]):
        if x[i] >= 0.0:
            out[i] = 1.0 / (1.0 + c_exp(-x[i]))
        else:
            e = c_exp(x[i])
            out[i] = e / (1.0 + e)


cdef void _sigmoid1d_bwd(double[::1] y, double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        out[i] = gy[i] * y[i] * (1.0 - y[i])


cdef void _relu1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] if x[i] > 0.0 else 0.0


cdef void _relu1d_bwd(double[::1] x, double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = gy[i] if x[i] > 0.0 else 0.0


cdef void _exp1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_exp(x[i])


cdef void _exp1d_bwd(double[::1] y, double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        out[i] = gy[i] * y[i]


cdef void _log1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_log(x[i])


cdef void _log1d_bwd(double[::1] x, double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = gy[i] / x[i]


def tanh_forward(cnp.ndarray x):
    out = np.empty_like(x)
    _tanh1d(x.reshape(-1), out.reshape(-1))
    return out


def tanh_backward(cnp.ndarray y, cnp.ndarray gy):
    out = np.empty_like(y)
    _tanh1d_bwd(y.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def sigmoid_forward(cnp.ndarray x):
    out = np.empty_like(x)
    _sigmoid1d(x.reshape(-1), out.reshape(-1))
    return out


def sigmoid_backward(cnp.ndarray y, cnp.ndarray gy):
    out = np.empty_like(y)
    _sigmoid1d_bwd(y.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def relu_forward(cnp.ndarray x):
    out = np.empty_like(x)
    _relu1d(x.reshape(-1), out.reshape(-1))
    return out


def relu_backward(cnp.ndarray x, cnp.ndarray gy):
    out = np.empty_like(x)
    _relu1d_bwd(x.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def exp_forward(cnp.ndarray x):
    out = np.empty_like(x)
    _exp1d(x.reshape(-1), out.reshape(-1))
    return out


def exp_backward(cnp.ndarray y, cnp.ndarray gy):
    out = np.empty_like(y)
    _exp1d_bwd(y.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def log_forward(cnp.ndarray x):
    out = np.empty_like(x)
    _log1d(x.reshape(-1), out.reshape(-1))
    return out


def log_backward(cnp.ndarray x, cnp.ndarray gy):
    out = np.empty_like(x)
    _log1d_bwd(x.reshape(-1), gy.reshape(-1), out.reshape(-1))
    return out


def softmax_forward(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(xv.shape[0]):
        m = xv[i, 0]
        for j in range(1, xv.shape[1]):
            if xv[i, j] > m:
                m = xv[i, j]
        s = 0.0
        for j in range(xv.shape[1]):
            ov[i, j] = c_exp(xv[i, j] - m)
            s += ov[i, j]
        for j in range(xv.shape[1]):
            ov[i, j] /= s
    return out


def softmax_backward(cnp.ndarray y, cnp.ndarray gy):
    cdef cnp.ndarray out = np.empty_like(y)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = gy
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(yv.shape[0]):
        inner = 0.0
        for j in range(yv.shape[1]):
            inner += yv[i, j] * gv[i, j]
        for j in range(yv.shape[1]):
            ov[i, j] = yv[i, j] * (gv[i, j] - inner)
    return out
