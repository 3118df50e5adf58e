"""Time-smoothed relation distillation losses.

Loss functions come in pairs: ``f(...)`` returns the scalar and
``f_grad(...)`` returns ``(value, gradient w.r.t. the quantized-side input)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12


class TraceError(KeyError):
    pass


@dataclass
class DistillConfig:
    smooth_steps: int = 1
    lam: float = 100.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.smooth_steps < 0:
            raise ValueError("smooth_steps must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class FeatureTrace:
    """Pre-projection features keyed by timestep, recorded in denoising order."""

    source: str = "fp"
    maps: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, t: int, feature: np.ndarray) -> None:
        if self.maps:
            last = next(reversed(self.maps))
            if t >= last:
                raise ValueError("timesteps must strictly decrease along the trajectory")
            if feature.shape != self.maps[last].shape:
                raise ValueError("feature shape changed within the trace")
        self.maps[t] = np.asarray(feature, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, t: int) -> np.ndarray:
        try:
            return self.maps[t]
        except KeyError:
            raise TraceError(f"timestep {t} missing from trace") from None


@dataclass
class SimilarityMap:
    probs: np.ndarray
    temperature: float = 1.0


def smooth_features(trace, T: int, N: int) -> np.ndarray:
    """Sum of the feature maps at timesteps ``T, T-1, ..., T-N``."""
    out = np.array(trace[T], dtype=np.float64, copy=True)
    for j in range(1, N + 1):
        out += trace[T - j]
    return out


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _normalize_rows(F):
    norms = np.maximum(np.linalg.norm(F, axis=1, keepdims=True), NORM_FLOOR)
    return F / norms, norms


def similarity_distributions(F_hat, temperature: float = 1.0) -> SimilarityMap:
    """Row-wise softmax of the cosine-similarity matrix of ``F_hat`` rows."""
    F_hat = np.asarray(F_hat, dtype=np.float64)
    if F_hat.ndim != 2 or min(F_hat.shape) < 1:
        raise ValueError("features must be a non-empty (positions, channels) matrix")
    U, _ = _normalize_rows(F_hat)
    return SimilarityMap(_softmax_rows(U @ U.T / temperature), temperature)


def _kl_rows(P, Q):
    Qf = np.maximum(Q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(np.where(P > 0, P, 1.0)) - np.log(Qf)), 0.0)
    return terms.sum(axis=1)


def relation_kl_loss(S_f: SimilarityMap, S_q: SimilarityMap) -> float:
    """Sum over positions of ``KL(S_f[i] || S_q[i])``."""
    P, Q = np.asarray(S_f.probs), np.asarray(S_q.probs)
    if P.shape != Q.shape:
        raise ValueError(f"similarity map shapes differ: {P.shape} vs {Q.shape}")
    return float(np.sum(_kl_rows(P, Q)))


def relation_kl_grad(F_f, F_q, temperature: float = 1.0):
    """Relation KL between two feature maps and its gradient w.r.t. ``F_q``."""
    F_q = np.asarray(F_q, dtype=np.float64)
    P = similarity_distributions(F_f, temperature).probs
    U, norms = _normalize_rows(F_q)
    Q = _softmax_rows(U @ U.T / temperature)
    if P.shape != Q.shape:
        raise ValueError(f"similarity map shapes differ: {P.shape} vs {Q.shape}")
    loss = float(np.sum(_kl_rows(P, Q)))

    live = Q > PROB_FLOOR
    dQ = np.where(live, -P / np.where(live, Q, 1.0), 0.0)
    dZ = Q * (dQ - np.sum(Q * dQ, axis=1, keepdims=True))
    dS = dZ / temperature
    dU = (dS + dS.T) @ U
    floored = norms[:, 0] <= NORM_FLOOR
    radial = np.sum(U * dU, axis=1, keepdims=True)
    dF = np.where(floored[:, None], dU, dU - U * radial) / norms
    return loss, dF


def task_loss(out_f, out_q) -> float:
    d = np.asarray(out_f, dtype=np.float64) - np.asarray(out_q, dtype=np.float64)
    return float(np.mean(d * d))


def task_loss_grad(out_f, out_q):
    d = np.asarray(out_q, dtype=np.float64) - np.asarray(out_f, dtype=np.float64)
    return float(np.mean(d * d)), 2.0 * d / d.size


def l2_feature_loss(F_f, F_q) -> float:
    return task_loss(F_f, F_q)


def l2_feature_grad(F_f, F_q):
    return task_loss_grad(F_f, F_q)


def total_loss(task: float, dis: float, lam: float) -> float:
    return task + lam * dis
