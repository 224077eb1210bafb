"""Numpy reference implementations of the dense kernels.

Every function here has a signature-identical twin in _fastcore.pyx and the
package picks one implementation at import time (see __init__).  Contract:
float64 C-contiguous arrays; affine/matmul/softmax take 2-D inputs, the
elementwise kernels accept any shape.
"""

import numpy as np


def affine_forward(x, w, b):
    return x @ w + b


def affine_backward(x, w, gy):
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def matmul_forward(a, b):
    return a @ b


def matmul_backward(a, b, gy):
    return gy @ b.T, a.T @ gy


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y, gy):
    return gy * (1.0 - y * y)


def sigmoid_forward(x):
    # exp only ever sees non-positive arguments, so no overflow either side
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, gy):
    return gy * y * (1.0 - y)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return gy * (x > 0.0)


def exp_forward(x):
    return np.exp(x)


def exp_backward(y, gy):
    return gy * y


def log_forward(x):
    return np.log(x)


def log_backward(x, gy):
    return gy / x


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    inner = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - inner)
