"""Median-threshold update binarization ("smartification"), the
zero-threshold signSGD baseline, alignment diagnostics and payload
accounting."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

MODES = ("signed_median", "abs_median", "zero")

# 4-byte length + packed bits + 8-byte threshold
WIRE_OVERHEAD = 4 + 8


class SmartifyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinDelta:
    """Packed +-1 update. Bit j is 1 for +1, stored little-endian within bytes."""

    bits: bytes
    d_params: int
    threshold_used: float
    mode: str

    def __post_init__(self):
        if len(self.bits) != (self.d_params + 7) // 8:
            raise SmartifyError(f"{len(self.bits)} payload bytes cannot hold {self.d_params} signs")

    def unpack(self) -> np.ndarray:
        return kernels.unpack_signs(np.frombuffer(self.bits, dtype=np.uint8), self.d_params)

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.d_params) + self.bits + struct.pack("<d", self.threshold_used)

    @classmethod
    def from_bytes(cls, raw: bytes, mode: str = "signed_median") -> "BinDelta":
        if len(raw) < 4:
            raise SmartifyError("truncated binarized update")
        (d,) = struct.unpack_from("<I", raw, 0)
        nb = (d + 7) // 8
        if len(raw) != 4 + nb + 8:
            raise SmartifyError(f"binarized update of d={d} needs {4 + nb + 8} bytes, got {len(raw)}")
        (thr,) = struct.unpack_from("<d", raw, 4 + nb)
        return cls(bytes(raw[4:4 + nb]), d, thr, mode)

    def __eq__(self, other):
        return isinstance(other, BinDelta) and self.bits == other.bits and self.d_params == other.d_params


def threshold(delta, mode: str) -> float:
    if mode == "signed_median":
        return float(np.median(delta))
    if mode == "abs_median":
        return float(np.median(np.abs(delta)))
    if mode == "zero":
        return 0.0
    raise SmartifyError(f"unknown binarization mode {mode!r}")


def binarize(delta, mode: str = "signed_median") -> BinDelta:
    """+1 where ``delta >= threshold`` else -1 (ties go to +1).

    ``signed_median`` thresholds at the median of the update,
    ``abs_median`` at the median of its absolute values, ``zero`` at 0
    (signSGD).
    """
    delta = np.ascontiguousarray(delta, dtype=np.float64).ravel()
    if delta.size == 0:
        raise SmartifyError("cannot binarize an empty update")
    if not np.isfinite(delta).all():
        raise SmartifyError("update contains non-finite values")
    thr = threshold(delta, mode)
    packed = kernels.sign_pack(delta, thr)
    return BinDelta(packed.tobytes(), delta.size, thr, mode)


def pack_signs(signs) -> BinDelta:
    """Wrap an explicit +-1 vector (threshold 0) without re-thresholding."""
    s = np.asarray(signs)
    if not np.isin(s, (-1, 1)).all():
        raise SmartifyError("values must be +-1")
    return BinDelta(kernels.sign_pack(s.astype(np.float64), 0.0).tobytes(), s.size, 0.0, "zero")


def sum_signs(bins) -> np.ndarray:
    """Exact integer sum of several unpacked BinDeltas."""
    bins = list(bins)
    d = bins[0].d_params
    rows = np.frombuffer(b"".join(b.bits for b in bins), dtype=np.uint8).reshape(len(bins), -1)
    return kernels.sum_packed_signs(rows, d)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise SmartifyError("cosine undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_alignment(bin_delta: BinDelta, full) -> float:
    full = np.asarray(full, dtype=np.float64).ravel()
    if full.size != bin_delta.d_params:
        raise SmartifyError(f"length mismatch: {bin_delta.d_params} vs {full.size}")
    return cosine(bin_delta.unpack(), full)


def payload_bits(bin_delta: BinDelta) -> int:
    """Information bits of the update: one per coordinate, header excluded."""
    return bin_delta.d_params


def header_bits() -> int:
    return 8 * WIRE_OVERHEAD


def compression_ratio(bin_delta: BinDelta, precision_bits: int = 32) -> float:
    return precision_bits * bin_delta.d_params / payload_bits(bin_delta)


def wire_bytes(d_params: int) -> int:
    return WIRE_OVERHEAD + (d_params + 7) // 8


@dataclass(frozen=True)
class DescentReport:
    loss_before: float
    loss_after: float
    cosine: float

    @property
    def descended(self) -> bool:
        return self.loss_after < self.loss_before


def empirical_descent_check(loss_fn, W, bin_delta: BinDelta, eta: float, grad=None) -> DescentReport:
    """Compare ``loss_fn(W)`` with ``loss_fn(W - eta * signs)``.

    ``bin_delta`` encodes a descent direction in gradient orientation (the
    binarized gradient, not the update). The reported cosine is between
    the signs and ``grad`` if given, else a central-difference gradient.
    """
    W = np.asarray(W, dtype=np.float64)
    s = bin_delta.unpack()
    if grad is None:
        grad = np.empty_like(W)
        h = 1e-6
        for j in range(W.size):
            e = np.zeros_like(W)
            e[j] = h
            grad[j] = (loss_fn(W + e) - loss_fn(W - e)) / (2 * h)
    before = float(loss_fn(W))
    after = float(loss_fn(W - eta * s))
    cos = cosine(s, grad) if np.any(grad) else math.nan
    return DescentReport(before, after, cos)
