"""Tiny fully-connected building blocks shared by encoders and heads."""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor, matmul, relu


class Mlp:
    """Dense stack with relu between layers and a linear final layer.

    ``zero_last`` zero-initializes the final layer so the network starts
    as the constant-zero function (used for deformation heads).
    """

    def __init__(self, sizes, rng, dtype=np.float32, zero_last=False):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        n_layers = len(sizes) - 1
        for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last and i == n_layers - 1:
                w = np.zeros((m, n))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / m), size=(m, n))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(n, dtype=dtype), requires_grad=True))

    def __call__(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if i != last:
                h = relu(h)
        return h

    def parameters(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out
