"""Uniform affine quantization.

Codes follow ``q = clip(round(x / s) + z, 0, 2**N - 1)`` and dequantize as
``(q - z) * s`` with ``s = (u - l) / (2**N - 1)`` and ``z = -round(l / s)``.
``round`` is half-away-from-zero everywhere (see :func:`round_half_away`).
The fitted range always contains zero, so ``0 <= z <= 2**N - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels

DEGENERATE_RANGE = 1e-12
RANGE_EPS = 1e-6
MAX_BITS = 16


class QuantError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return kernels.round_half_away(x)


def _round_scalar(v: float) -> int:
    return int(round_half_away(np.array([v]))[0])


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    zero_point: int
    lower: float
    upper: float

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @classmethod
    def from_range(cls, lower: float, upper: float, bits: int) -> "QuantParams":
        """Derive scale and zero-point from an already-chosen ``[lower, upper]``."""
        _check_bits(bits)
        lower = min(float(lower), 0.0)
        upper = max(float(upper), 0.0)
        if upper - lower < DEGENERATE_RANGE:
            upper = lower + RANGE_EPS
        qmax = (1 << bits) - 1
        scale = (upper - lower) / qmax
        zero = -_round_scalar(lower / scale)
        return cls(bits, scale, int(min(max(zero, 0), qmax)), lower, upper)

    def with_scale(self, scale: float) -> "QuantParams":
        """Same range and bits with a new (e.g. trained) scale; zero-point is recomputed."""
        zero = -_round_scalar(self.lower / scale)
        return QuantParams(self.bits, float(scale), int(min(max(zero, 0), self.qmax)),
                           self.lower, self.upper)


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams | list[QuantParams]
    channel_axis: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= MAX_BITS:
        raise QuantError(f"bits must be an integer in [1, {MAX_BITS}], got {bits!r}")


def _as_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise QuantError("empty input")
    if not np.all(np.isfinite(x)):
        raise QuantError("non-finite input")
    return x


def compute_quant_params(x, bits: int, range_mode: str | float = "min-max") -> QuantParams:
    """Fit quantization parameters to ``x``.

    ``range_mode`` is ``"min-max"`` or a percentile ``p`` (e.g. ``99.9``), in
    which case the range is ``[P(100 - p), P(p)]``.
    """
    x = _as_input(x)
    _check_bits(bits)
    if range_mode == "min-max":
        lo, hi = float(x.min()), float(x.max())
    else:
        p = float(range_mode)
        if not 50.0 < p <= 100.0:
            raise QuantError(f"percentile must be in (50, 100], got {p}")
        lo, hi = (float(v) for v in np.percentile(x, [100.0 - p, p]))
    return QuantParams.from_range(lo, hi, bits)


def _row_arrays(params: Sequence[QuantParams]):
    scale = np.array([p.scale for p in params], dtype=np.float64)
    zero = np.array([p.zero_point for p in params], dtype=np.float64)
    qmax = np.array([p.qmax for p in params], dtype=np.float64)
    return scale, zero, qmax


def quantize(x, params: QuantParams) -> QuantizedTensor:
    x = _as_input(x)
    codes = kernels.quantize_rows(x.reshape(1, -1), *_row_arrays([params]))
    return QuantizedTensor(codes.reshape(x.shape), params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.channel_axis is None:
        p = q.params
        return (q.codes.astype(np.float64) - p.zero_point) * p.scale
    codes = np.moveaxis(q.codes, q.channel_axis, 0).astype(np.float64)
    scale, zero, _ = _row_arrays(q.params)
    bshape = (-1,) + (1,) * (codes.ndim - 1)
    out = (codes - zero.reshape(bshape)) * scale.reshape(bshape)
    return np.moveaxis(out, 0, q.channel_axis)


def fake_quant(x, params: QuantParams) -> np.ndarray:
    x = _as_input(x)
    return kernels.fake_quant_rows(x.reshape(1, -1), *_row_arrays([params])).reshape(x.shape)


def fit_per_channel(W, bits_per_channel: Sequence[int], channel_axis: int = 0) -> list[QuantParams]:
    """Min-max parameters for every slice along ``channel_axis``."""
    W = _as_input(W)
    rows = np.moveaxis(W, channel_axis, 0).reshape(W.shape[channel_axis], -1)
    if len(bits_per_channel) != rows.shape[0]:
        raise QuantError(
            f"got {len(bits_per_channel)} bit-widths for {rows.shape[0]} channels")
    return [QuantParams.from_range(r.min(), r.max(), int(b))
            for r, b in zip(rows, bits_per_channel)]


def per_channel_quantize(W, bits_per_channel: Sequence[int], channel_axis: int = 0) -> QuantizedTensor:
    W = _as_input(W)
    params = fit_per_channel(W, bits_per_channel, channel_axis)
    moved = np.moveaxis(W, channel_axis, 0)
    codes = kernels.quantize_rows(moved.reshape(moved.shape[0], -1), *_row_arrays(params))
    codes = np.moveaxis(codes.reshape(moved.shape), 0, channel_axis)
    return QuantizedTensor(codes, params, channel_axis)


def fake_quant_per_channel(W, params: Sequence[QuantParams]) -> np.ndarray:
    """Fake-quantize each row of a 2-D weight with its own parameters."""
    W = np.asarray(W, dtype=np.float64)
    return kernels.fake_quant_rows(W, *_row_arrays(params))


def quant_mse(x, params: QuantParams) -> float:
    x = _as_input(x)
    d = x - fake_quant(x, params)
    return float(np.mean(d * d))


def sqnr_db(x, xq) -> float:
    """Signal-to-quantization-noise ratio in dB."""
    x = np.asarray(x, dtype=np.float64)
    noise = float(np.sum((x - xq) ** 2))
    if noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(float(np.sum(x * x)) / noise)
