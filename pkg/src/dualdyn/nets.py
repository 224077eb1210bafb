"""Affine-stack network helper shared by vector fields and flow sub-nets."""

from __future__ import annotations

import numpy as np

from dualdyn.tape import Tensor, init_params


class Mlp:
    """Affine layers with tanh between them; parameter names are prefixed.

    ``n_hidden`` counts hidden layers (0 means a single affine map).
    ``zero_out`` zero-initializes the final affine so the net starts as the
    constant-zero map.
    """

    def __init__(self, name, in_dim, width, n_hidden, out_dim, rng, zero_out=False):
        self.name = name
        dims = [in_dim] + [width] * n_hidden + [out_dim]
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            scheme = "zeros" if (zero_out and last) else "xavier_uniform"
            self.weights.append(init_params((dims[i], dims[i + 1]), scheme, rng))
            self.biases.append(init_params((dims[i + 1],), "zeros"))

    @property
    def n_layers(self):
        return len(self.weights)

    def apply(self, ops, x):
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ops.affine(
                h,
                ops.param(f"{self.name}.W{i}", w),
                ops.param(f"{self.name}.b{i}", b),
            )
            if i < len(self.weights) - 1:
                h = ops.tanh(h)
        return h

    def params(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{self.name}.W{i}", w
            yield f"{self.name}.b{i}", b


def affine_params(name, in_dim, out_dim, rng):
    """Single affine map's parameters as a (name, Tensor) dict."""
    return {
        f"{name}.W": init_params((in_dim, out_dim), "xavier_uniform", rng),
        f"{name}.b": init_params((out_dim,), "zeros"),
    }


def apply_affine(ops, params, name, x):
    return ops.affine(
        x,
        ops.param(f"{name}.W", params[f"{name}.W"]),
        ops.param(f"{name}.b", params[f"{name}.b"]),
    )
