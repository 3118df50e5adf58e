"""Toy DDPM: noise schedule, MLP denoiser, sampling, LoRA and STE fine-tuning.

The denoiser maps ``[x_t, emb(t)]`` through two SiLU hidden layers to a
noise prediction. The second hidden activation is the pre-projection
feature used for distillation. Weights are stored ``(c_out, c_in)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, trd
from .quant import QuantParams, round_half_away

LAYERS = ("fc1", "fc2", "proj")
HIDDEN_LAYERS = ("fc1", "fc2")
PROJ_BITS = 8
SCALE_FLOOR = 1e-10


class DiffusionError(ValueError):
    pass


class FinetuneDiverged(RuntimeError):
    pass


# -- schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def at(self, t: int):
        """``(beta_t, alpha_t, alpha_bar_t, alpha_bar_{t-1})`` for 1-based ``t``."""
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")
        ab = self.alpha_bar
        prev = ab[t - 2] if t > 1 else 1.0
        return self.beta[t - 1], 1.0 - self.beta[t - 1], ab[t - 1], prev

    def posterior_variance(self, t: int) -> float:
        beta, _, ab, ab_prev = self.at(t)
        return float(beta * (1.0 - ab_prev) / (1.0 - ab))


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise DiffusionError("T must be positive")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if not np.all((beta > 0) & (beta < 1)):
        raise DiffusionError("betas must lie in (0, 1)")
    return NoiseSchedule(beta)


def forward_noise(x0, t, sched: NoiseSchedule, noise):
    """Closed-form ``q(x_t | x_0)``. ``t`` may be an int or one timestep per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise DiffusionError("noise shape must match x0")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise DiffusionError(f"timestep outside [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, noise):
    beta, alpha, ab, _ = sched.at(t)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    return mean + math.sqrt(sched.posterior_variance(t)) * noise


def two_gaussians(n: int = 10_000, sigma: float = 0.05, seed: int = 0) -> np.ndarray:
    """2-D mixture with modes at (-1, 0) and (1, 0)."""
    rng = np.random.default_rng(seed)
    centers = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts = rng.normal(0.0, sigma, size=(n, 2))
    pts[:, 0] += centers
    return pts


def mode_coverage(samples, sigma: float = 0.05, k: float = 3.0) -> float:
    """Fraction of samples within ``k * sigma`` (Euclidean) of a mixture mode."""
    samples = np.asarray(samples)
    d = np.minimum(np.hypot(samples[:, 0] - 1.0, samples[:, 1]),
                   np.hypot(samples[:, 0] + 1.0, samples[:, 1]))
    return float(np.mean(d <= k * sigma))


# -- model ------------------------------------------------------------------


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def silu(a):
    return a * _sigmoid(a)


def silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


@dataclass
class LoraAdapter:
    """Low-rank update ``B @ A`` with ``B: (c_out, r)`` and ``A: (r, c_in)``."""

    B: np.ndarray
    A: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, c_out: int, c_in: int, rank: int, rng) -> "LoraAdapter":
        if not 1 <= rank <= min(c_out, c_in):
            raise DiffusionError(f"LoRA rank {rank} outside [1, {min(c_out, c_in)}]")
        A = rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(rank, c_in))
        return cls(np.zeros((c_out, rank)), A)


def lora_apply(W, adapter: LoraAdapter) -> np.ndarray:
    return np.asarray(W, dtype=np.float64) + adapter.B @ adapter.A


def _zero_points(scale, lower, qmax):
    z = -round_half_away(lower / scale)
    return np.clip(z, 0.0, qmax)


@dataclass
class QuantLayer:
    """Fake-quantization state of one linear layer.

    Ranges (``w_lower``, ``act_lower``) are frozen at calibration; zero-points
    are recomputed from the (trainable) scales.
    """

    bits: np.ndarray
    delta: np.ndarray
    w_scale: np.ndarray
    w_lower: np.ndarray
    act_bits: int
    act_scale: float
    act_lower: float
    lora: LoraAdapter

    @property
    def w_qmax(self) -> np.ndarray:
        return (2.0 ** self.bits) - 1.0

    @property
    def act_qmax(self) -> float:
        return float(2 ** self.act_bits - 1)

    def w_zero(self) -> np.ndarray:
        return _zero_points(self.w_scale, self.w_lower, self.w_qmax)

    def act_zero(self) -> float:
        return float(_zero_points(np.array([self.act_scale]), np.array([self.act_lower]),
                                  self.act_qmax)[0])

    def act_params(self) -> QuantParams:
        upper = self.act_lower + self.act_scale * self.act_qmax
        return QuantParams(self.act_bits, self.act_scale, int(self.act_zero()),
                           self.act_lower, upper)

    @classmethod
    def fit(cls, W, bits, delta, act_params: QuantParams, lora: LoraAdapter) -> "QuantLayer":
        Ws = np.asarray(W, dtype=np.float64) / delta
        params = [QuantParams.from_range(r.min(), r.max(), int(b)) for r, b in zip(Ws, bits)]
        return cls(
            bits=np.asarray(bits, dtype=np.int64).copy(),
            delta=np.asarray(delta, dtype=np.float64).copy(),
            w_scale=np.array([p.scale for p in params]),
            w_lower=np.array([p.lower for p in params]),
            act_bits=act_params.bits,
            act_scale=act_params.scale,
            act_lower=act_params.lower,
            lora=lora,
        )

    def forward(self, x, W, b):
        xs = x * self.delta
        xq, amask, ads = kernels.fake_quant_rows_ste(
            xs.reshape(1, -1), [self.act_scale], [self.act_zero()], [self.act_qmax])
        xq = xq.reshape(xs.shape)
        Ws = lora_apply(W, self.lora) / self.delta
        Wq, wmask, wds = kernels.fake_quant_rows_ste(Ws, self.w_scale, self.w_zero(), self.w_qmax)
        y = xq @ Wq.T + b
        cache = (xq, amask.reshape(xs.shape), ads.reshape(xs.shape), Wq, wmask, wds)
        return y, cache

    def backward(self, dy, cache):
        """Straight-through backward; returns ``(dx, grads)`` for the trainable parameters."""
        xq, amask, ads, Wq, wmask, wds = cache
        dWq = dy.T @ xq
        dxq = dy @ Wq
        dWeff = dWq * wmask / self.delta
        grads = {
            "w_scale": np.sum(dWq * wds, axis=1),
            "act_scale": np.array([np.sum(dxq * ads)]),
            "B": dWeff @ self.lora.A.T,
            "A": self.lora.B.T @ dWeff,
        }
        return dxq * amask * self.delta, grads


@dataclass
class ToyDenoiser:
    params: dict[str, np.ndarray]
    data_dim: int = 2
    hidden: int = 64
    temb_dim: int = 16
    quant: dict[str, QuantLayer] | None = None

    @classmethod
    def init(cls, seed: int = 0, data_dim: int = 2, hidden: int = 64, temb_dim: int = 16) -> "ToyDenoiser":
        rng = np.random.default_rng(seed)
        dims = [(hidden, data_dim + temb_dim), (hidden, hidden), (data_dim, hidden)]
        params = {}
        for name, (o, i) in zip(LAYERS, dims):
            params[f"{name}.W"] = rng.normal(0.0, math.sqrt(2.0 / i), size=(o, i))
            params[f"{name}.b"] = np.zeros(o)
        params["proj.W"] *= 0.1
        return cls(params, data_dim, hidden, temb_dim)

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser({k: v.copy() for k, v in self.params.items()},
                           self.data_dim, self.hidden, self.temb_dim, None)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {name: self.params[f"{name}.W"].shape for name in LAYERS}

    def inputs(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        t = np.asarray(t)
        if np.any(t < 1):
            raise DiffusionError(f"timestep must be >= 1, got {t}")
        emb = timestep_embedding(t, self.temb_dim)
        if emb.shape[0] == 1 and x_t.shape[0] != 1:
            emb = np.repeat(emb, x_t.shape[0], axis=0)
        return np.concatenate([x_t, emb], axis=1)


def _linear(model: ToyDenoiser, name: str, x, quantized: bool):
    W, b = model.params[f"{name}.W"], model.params[f"{name}.b"]
    if quantized:
        return model.quant[name].forward(x, W, b)
    return x @ W.T + b, None


def forward_with_cache(model: ToyDenoiser, x_t, t, mode: str = "fp"):
    if mode not in ("fp", "quantized"):
        raise DiffusionError(f"unknown mode {mode!r}")
    quantized = mode == "quantized"
    if quantized and model.quant is None:
        raise DiffusionError("model has no quantization state")
    inp = model.inputs(x_t, t)
    a1, c1 = _linear(model, "fc1", inp, quantized)
    h1 = silu(a1)
    a2, c2 = _linear(model, "fc2", h1, quantized)
    h2 = silu(a2)
    out, c3 = _linear(model, "proj", h2, quantized)
    return out, h2, (inp, a1, h1, a2, h2, c1, c2, c3)


def denoiser_forward(model: ToyDenoiser, x_t, t, mode: str = "fp", T: int | None = None):
    """Predicted noise and pre-projection feature ``(batch, hidden)``."""
    if T is not None and np.any(np.asarray(t) > T):
        raise DiffusionError(f"timestep {t} outside [1, {T}]")
    out, feat, _ = forward_with_cache(model, x_t, t, mode)
    return out, feat


def fp_backward(model: ToyDenoiser, cache, d_out, d_feat=None) -> dict[str, np.ndarray]:
    inp, a1, h1, a2, h2 = cache[:5]
    p = model.params
    g = {"proj.W": d_out.T @ h2, "proj.b": d_out.sum(axis=0)}
    dh2 = d_out @ p["proj.W"]
    if d_feat is not None:
        dh2 = dh2 + d_feat
    da2 = dh2 * silu_grad(a2)
    g["fc2.W"] = da2.T @ h1
    g["fc2.b"] = da2.sum(axis=0)
    da1 = (da2 @ p["fc2.W"]) * silu_grad(a1)
    g["fc1.W"] = da1.T @ inp
    g["fc1.b"] = da1.sum(axis=0)
    return g


def quant_backward(model: ToyDenoiser, cache, d_out, d_feat=None) -> dict[str, np.ndarray]:
    """Gradients of LoRA factors and quantizer scales, keyed ``"<layer>.<name>"``."""
    _, a1, _, a2, _, c1, c2, c3 = cache
    grads = {}
    dh2, g = model.quant["proj"].backward(d_out, c3)
    grads.update({f"proj.{k}": v for k, v in g.items()})
    if d_feat is not None:
        dh2 = dh2 + d_feat
    dh1, g = model.quant["fc2"].backward(dh2 * silu_grad(a2), c2)
    grads.update({f"fc2.{k}": v for k, v in g.items()})
    _, g = model.quant["fc1"].backward(dh1 * silu_grad(a1), c1)
    grads.update({f"fc1.{k}": v for k, v in g.items()})
    return grads


# -- optimisation -----------------------------------------------------------


class Adam:
    def __init__(self, lr: dict[str, float] | float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr_scale: float = 1.0):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lr[k] if isinstance(self.lr, dict) else self.lr
            params[k] -= lr_scale * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 2e-3
    seed: int = 0
    weight_bits: int = 2
    act_bits: int = 4
    lora_rank: int = 4
    distill: trd.DistillConfig = field(default_factory=trd.DistillConfig)
    distill_metric: str = "kl"
    scale_lr: float = 1e-3
    finetune_batch: int = 64
    train_trajectories: int = 4


def noise_prediction_loss(model: ToyDenoiser, x0, t, noise, sched: NoiseSchedule):
    x_t = forward_noise(x0, t, sched, noise)
    out, _, cache = forward_with_cache(model, x_t, t, "fp")
    loss, d_out = trd.task_loss_grad(noise, out)
    return loss, fp_backward(model, cache, d_out)


def train_fp(model: ToyDenoiser, data, config: TrainConfig, sched: NoiseSchedule):
    """Noise-prediction training of the FP teacher. Returns ``(model, loss_curve)``."""
    rng = np.random.default_rng(config.seed)
    data = np.asarray(data, dtype=np.float64)
    opt = Adam(config.lr)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(data), config.batch_size)
        t = rng.integers(1, sched.T + 1, config.batch_size)
        noise = rng.normal(size=(config.batch_size, model.data_dim))
        loss, grads = noise_prediction_loss(model, data[idx], t, noise, sched)
        # cosine decay to 10% of the base rate
        decay = 0.1 + 0.45 * (1.0 + math.cos(math.pi * step / config.steps))
        opt.step(model.params, grads, decay)
        losses.append(loss)
    return model, np.array(losses)


# -- sampling ---------------------------------------------------------------


def trajectory_noise(seed: int, T: int, batch: int, dim: int) -> np.ndarray:
    """Starting point (row 0) and per-step noise (row ``T - t + 1`` for step ``t``)."""
    return np.random.default_rng(seed).normal(size=(T + 1, batch, dim))


def run_trajectory(model: ToyDenoiser, sched: NoiseSchedule, batch: int, seed: int, mode: str = "fp"):
    """Full reverse chain. Returns ``(states, trace, outputs)``.

    ``states[j]`` is ``x_{T-j}``; ``outputs[j]`` is the model output at ``T-j``.
    """
    noise = trajectory_noise(seed, sched.T, batch, model.data_dim)
    x = noise[0]
    states = [x]
    outputs = []
    trace = trd.FeatureTrace(source=mode)
    for t in range(sched.T, 0, -1):
        eps, feat = denoiser_forward(model, x, t, mode)
        trace.add(t, feat)
        outputs.append(eps)
        x = reverse_step(x, eps, t, sched, noise[sched.T - t + 1])
        states.append(x)
    return np.stack(states), trace, np.stack(outputs)


def sample_trajectory(model: ToyDenoiser, sched: NoiseSchedule, batch: int, seed: int, mode: str = "fp"):
    states, trace, _ = run_trajectory(model, sched, batch, seed, mode)
    return states[-1], trace


def trajectory_mse(states_a, states_b) -> float:
    """MSE over all generated states (the shared starting noise is excluded)."""
    d = np.asarray(states_a)[1:] - np.asarray(states_b)[1:]
    return float(np.mean(d * d))


# -- quantized model and fine-tuning ----------------------------------------


def trainable(q: ToyDenoiser) -> dict[str, np.ndarray]:
    """Views onto the fine-tunable arrays, keyed like the gradients."""
    out = {}
    for name, layer in q.quant.items():
        out[f"{name}.B"] = layer.lora.B
        out[f"{name}.A"] = layer.lora.A
        out[f"{name}.w_scale"] = layer.w_scale
    return out


def _collect_fp_targets(fp: ToyDenoiser, sched: NoiseSchedule, config: TrainConfig):
    rng_seeds = np.random.default_rng(config.seed).integers(0, 2 ** 31, config.train_trajectories)
    targets = []
    for s in rng_seeds:
        states, trace, outputs = run_trajectory(fp, sched, config.finetune_batch, int(s), "fp")
        targets.append((states, trace, outputs))
    return targets


def finetune_quantized(fp: ToyDenoiser, q: ToyDenoiser, config: TrainConfig, sched: NoiseSchedule,
                       steps: int | None = None, lr: float | None = None):
    """Fine-tune LoRA factors and quantizer scales of ``q`` against ``fp``.

    Inputs come from FP-generated trajectories. Each step draws a
    trajectory and timestep ``tau``; the task loss is taken at ``tau`` and the
    distillation loss on features summed over ``tau, ..., tau - N``.
    Returns ``(q, loss_curve)``.
    """
    if q.quant is None:
        raise DiffusionError("quantized model has no quantization state")
    steps = config.steps if steps is None else steps
    lr = config.lr if lr is None else lr
    dc = config.distill
    N = dc.smooth_steps
    if N >= sched.T:
        raise DiffusionError("smooth_steps must be smaller than T")
    metric = config.distill_metric
    if metric not in ("kl", "l2", "none"):
        raise DiffusionError(f"unknown distillation metric {metric!r}")
    lam = dc.lam if metric != "none" else 0.0

    targets = _collect_fp_targets(fp, sched, config)
    rng = np.random.default_rng(config.seed + 1)
    params = trainable(q)
    act_scales = {name: np.array([layer.act_scale]) for name, layer in q.quant.items()}
    for name, arr in act_scales.items():
        params[f"{name}.act_scale"] = arr
    rates = {k: (config.scale_lr if "scale" in k else lr) for k in params}
    opt = Adam(rates)
    losses = []
    for step in range(steps):
        b = int(rng.integers(0, len(targets)))
        tau = int(rng.integers(N + 1, sched.T + 1))
        states, trace, outputs = targets[b]
        caches, feats = [], []
        out_q0 = None
        for j in range(N + 1):
            t = tau - j
            x_t = states[sched.T - t]
            out_q, feat_q, cache = forward_with_cache(q, x_t, t, "quantized")
            caches.append(cache)
            feats.append(feat_q)
            if j == 0:
                out_q0 = out_q
        task, d_out = trd.task_loss_grad(outputs[sched.T - tau], out_q0)
        dis, d_feat = 0.0, None
        if lam > 0.0:
            F_f = trd.smooth_features(trace, tau, N)
            F_q = np.sum(feats, axis=0)
            if metric == "kl":
                dis, d_feat = trd.relation_kl_grad(F_f, F_q, dc.temperature)
            else:
                dis, d_feat = trd.l2_feature_grad(F_f, F_q)
            d_feat = lam * d_feat
        loss = trd.total_loss(task, dis, lam)
        losses.append(loss)
        grads: dict[str, np.ndarray] = {}
        for j, cache in enumerate(caches):
            d_o = d_out if j == 0 else np.zeros_like(d_out)
            for k, v in quant_backward(q, cache, d_o, d_feat).items():
                grads[k] = grads[k] + v if k in grads else v
        opt.step(params, grads, 0.1 + 0.45 * (1.0 + math.cos(math.pi * step / steps)))
        for name, layer in q.quant.items():
            np.maximum(layer.w_scale, SCALE_FLOOR, out=layer.w_scale)
            layer.act_scale = max(float(act_scales[name][0]), SCALE_FLOOR)
            act_scales[name][0] = layer.act_scale
        window = max(1, min(10, steps // 10))
        if step + 1 >= 2 * window:
            start = np.mean(losses[:window])
            recent = np.mean(losses[-window:])
            if recent > 10.0 * start:
                raise FinetuneDiverged(
                    f"loss {recent:.4g} exceeded 10x its initial value {start:.4g} at step {step}")
    return q, np.array(losses)
