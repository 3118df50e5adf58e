"""Outlier-driven intra-layer mixed precision.

Weights follow the ``(c_out, c_in)`` layout with ``Y = X @ W.T``. Smoothing
is per input channel (columns of ``W``); bit-widths are per output channel
(rows of ``W``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .quant import QuantError, QuantParams, compute_quant_params, fake_quant, fake_quant_per_channel, fit_per_channel

DELTA_MIN = 1e-4
DELTA_MAX = 1e4
ACT_PERCENTILE = 99.9
SELECTIONS = ("kurtosis", "random", "head-tail")


class AllocationError(ValueError):
    pass


@dataclass
class ChannelBitAllocation:
    target_bits: int
    bits: np.ndarray
    group_size: int
    promoted: tuple[int, ...]
    demoted: tuple[int, ...]
    plus_extra: int = 0
    m: int = 0
    objectives: dict[int, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.bits)

    def check(self) -> None:
        """Raise ``AllocationError`` if any structural invariant is broken."""
        N = self.target_bits
        bits = np.asarray(self.bits)
        if not set(bits.tolist()) <= {N - 1, N, N + 1}:
            raise AllocationError("bit-width outside {N-1, N, N+1}")
        up = set(np.flatnonzero(bits == N + 1).tolist())
        down = set(np.flatnonzero(bits == N - 1).tolist())
        if up != set(self.promoted) or down != set(self.demoted):
            raise AllocationError("promoted/demoted sets disagree with bits")
        if len(up) != len(down) + self.plus_extra:
            raise AllocationError("promoted count must equal demoted count plus extra")

    @classmethod
    def uniform(cls, n: int, bits: int) -> "ChannelBitAllocation":
        return cls(bits, np.full(n, bits, dtype=np.int64), 1, (), ())


def compute_smooth_factors(W, X) -> np.ndarray:
    """Per-input-channel factors ``sqrt(max|W[:, i]| / max|X[:, i]|)``, clamped."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise QuantError("calibration batch must be a non-empty 2-D array")
    if W.shape[1] != X.shape[1]:
        raise QuantError(f"channel mismatch: W has {W.shape[1]} inputs, X has {X.shape[1]}")
    wmax = np.abs(W).max(axis=0)
    xmax = np.abs(X).max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.sqrt(wmax / xmax)
    delta = np.where(np.isnan(delta), 1.0, delta)
    return np.clip(delta, DELTA_MIN, DELTA_MAX)


def apply_smoothing(W, X, delta):
    """Return ``(W / delta, X * delta)``; the product ``X @ W.T`` is preserved."""
    delta = np.asarray(delta, dtype=np.float64)
    return np.asarray(W, dtype=np.float64) / delta, np.asarray(X, dtype=np.float64) * delta


def kurtosis(v) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size < 4:
        raise QuantError("kurtosis needs at least 4 values")
    k = kernels.kurtosis_rows(v.reshape(1, -1))[0]
    if np.isnan(k):
        raise QuantError("degenerate channel")
    return float(k)


def channel_kurtosis(W) -> np.ndarray:
    """Kurtosis of every output channel; constant channels get ``-inf``."""
    k = kernels.kurtosis_rows(np.asarray(W, dtype=np.float64))
    return np.where(np.isnan(k), -np.inf, k)


def rank_channels_by_kurtosis(W_hat) -> np.ndarray:
    return np.argsort(-channel_kurtosis(W_hat), kind="stable")


def selection_ranking(W_hat, method: str = "kurtosis", seed: int = 0) -> np.ndarray:
    """Channel order from most to least deserving of extra bits.

    ``random`` and ``head-tail`` (index order) are the comparators used in
    the outlier-selection ablation.
    """
    n = np.asarray(W_hat).shape[0]
    if method == "kurtosis":
        return rank_channels_by_kurtosis(W_hat)
    if method == "random":
        return np.random.default_rng(seed).permutation(n)
    if method == "head-tail":
        return np.arange(n)
    raise AllocationError(f"unknown selection method {method!r}; expected one of {SELECTIONS}")


def resolve_group_size(n: int, group_size: int | str = "auto") -> int:
    if group_size == "auto":
        return max(1, n // 10)
    return int(group_size)


def plus_count(n: int, plus_fraction: float) -> int:
    # round first so 0.1 * 70 does not ceil to 8
    return int(math.ceil(round(plus_fraction * n, 9)))


def proxy_objective(reference, X_hat, W_hat, bits, act_params: QuantParams | None = None) -> float:
    """Squared Frobenius distance between ``reference`` and the fake-quantized product."""
    Wq = fake_quant_per_channel(W_hat, fit_per_channel(W_hat, bits))
    Xq = X_hat if act_params is None else fake_quant(X_hat, act_params)
    d = np.asarray(reference, dtype=np.float64) - Xq @ Wq.T
    return float(np.sum(d * d))


def candidate_bits(ranking, target_bits: int, group_size: int, m: int, extra: int) -> np.ndarray:
    n = len(ranking)
    bits = np.full(n, target_bits, dtype=np.int64)
    up = m * group_size + extra
    down = m * group_size
    bits[ranking[:up]] = target_bits + 1
    if down:
        bits[ranking[n - down:]] = target_bits - 1
    return bits


def allocate_bits(
    W_hat,
    X_hat,
    target_bits: int,
    group_size: int | str = "auto",
    plus_fraction: float = 0.0,
    act_bits: int | None = None,
    reference=None,
    selection: str = "kurtosis",
    seed: int = 0,
    act_params: QuantParams | None = None,
) -> ChannelBitAllocation:
    """Grouped search over promotion/demotion pairs.

    Candidate ``m`` promotes the top ``m * k`` ranked channels to ``N + 1``
    bits and demotes the bottom ``m * k`` to ``N - 1``; the ``m`` with the
    smallest proxy objective wins (lowest ``m`` on ties). With
    ``plus_fraction > 0`` the next ``ceil(plus_fraction * n)`` ranked
    channels are also promoted, with no matching demotions.

    ``reference`` defaults to ``X_hat @ W_hat.T``, which equals the
    unsmoothed product. Activations are fake-quantized with ``act_params``
    when given, else with parameters fitted to ``X_hat`` at ``act_bits``.
    """
    W_hat = np.asarray(W_hat, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    n = W_hat.shape[0]
    if target_bits < 2 or target_bits + 1 > 16:
        raise AllocationError("target_bits must be in [2, 15]")
    if not 0.0 <= plus_fraction <= 0.5:
        raise AllocationError("plus_fraction must be in [0, 0.5]")
    k = resolve_group_size(n, group_size)
    if k < 1:
        raise AllocationError("group size must be positive")
    if k >= n:
        raise AllocationError("group too large")
    if reference is None:
        reference = X_hat @ W_hat.T
    if act_params is None and act_bits is not None:
        act_params = compute_quant_params(X_hat, act_bits, ACT_PERCENTILE)
    ranking = selection_ranking(W_hat, selection, seed)
    extra = plus_count(n, plus_fraction)
    objectives: dict[int, float] = {}
    for m in range((n // k) // 2 + 1):
        if 2 * m * k + extra > n:
            break
        bits = candidate_bits(ranking, target_bits, k, m, extra)
        objectives[m] = proxy_objective(reference, X_hat, W_hat, bits, act_params)
    best = min(objectives, key=lambda m: (objectives[m], m))
    bits = candidate_bits(ranking, target_bits, k, best, extra)
    alloc = ChannelBitAllocation(
        target_bits=target_bits,
        bits=bits,
        group_size=k,
        promoted=tuple(sorted(np.flatnonzero(bits == target_bits + 1).tolist())),
        demoted=tuple(sorted(np.flatnonzero(bits == target_bits - 1).tolist())),
        plus_extra=extra,
        m=best,
        objectives=objectives,
    )
    alloc.check()
    return alloc


def omq_proxy_loss(W, X, allocation: ChannelBitAllocation, delta, act_bits: int | None = None) -> float:
    """Proxy loss of a mixed-precision layer against its full-precision output."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    W_hat, X_hat = apply_smoothing(W, X, delta)
    act_params = None
    if act_bits is not None:
        act_params = compute_quant_params(X_hat, act_bits, ACT_PERCENTILE)
    return proxy_objective(X @ W.T, X_hat, W_hat, allocation.bits, act_params)
