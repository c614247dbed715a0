"""Pure numpy implementations of the hot kernels.

Signatures and semantics match ``_ckernels.pyx`` exactly; the compiled
module is preferred at import time when it has been built.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def softmax_sgd_epoch(W, b, X, y, order, batch_size, lr, l2, l1, prox_mu, W0, b0):
    """One epoch of minibatch SGD on softmax cross-entropy, updating W, b in place.

    Penalty gradient is ``l2 * W + l1 * sign(W)`` (weights only) and the
    proximal pull ``prox_mu * (theta - theta0)`` applies to weights and bias.
    """
    n = order.shape[0]
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        m = idx.shape[0]
        xb = X[idx]
        z = xb @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), y[idx]] -= 1.0
        gW = xb.T @ p / m
        gb = p.sum(axis=0) / m
        if l2 != 0.0:
            gW += l2 * W
        if l1 != 0.0:
            gW += l1 * np.sign(W)
        if prox_mu != 0.0:
            gW += prox_mu * (W - W0)
            gb += prox_mu * (b - b0)
        W -= lr * gW
        b -= lr * gb


def sign_pack(values, threshold):
    """Pack ``values >= threshold`` into bytes, bit j at (byte j//8, bit j%8)."""
    bits = np.asarray(values) >= threshold
    return np.packbits(bits, bitorder="little")


def unpack_signs(packed, d):
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), count=d, bitorder="little")
    return bits.astype(np.float64) * 2.0 - 1.0


def sum_packed_signs(packed_rows, d):
    """Sum of unpacked +-1 vectors given a (K, nbytes) uint8 array."""
    rows = np.asarray(packed_rows, dtype=np.uint8)
    bits = np.unpackbits(rows, axis=1, count=d, bitorder="little").astype(np.int64)
    ones = bits.sum(axis=0)
    return 2 * ones - rows.shape[0]
