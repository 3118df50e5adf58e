"""End-to-end orchestration: teacher training, calibration, OMQ, fine-tuning, evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import RunConfig
from .diffusion import (
    HIDDEN_LAYERS,
    LAYERS,
    PROJ_BITS,
    LoraAdapter,
    QuantLayer,
    ToyDenoiser,
    finetune_quantized,
    forward_with_cache,
    make_schedule,
    mode_coverage,
    run_trajectory,
    train_fp,
    trajectory_mse,
    two_gaussians,
)
from .omq import (
    ACT_PERCENTILE,
    ChannelBitAllocation,
    allocate_bits,
    apply_smoothing,
    channel_kurtosis,
    compute_smooth_factors,
    resolve_group_size,
)
from .quant import QuantParams, compute_quant_params, sqnr_db
from .report import RunReport, fp_size_bytes, model_size_bytes, overhead_bytes, payload_bits, _plain

log = logging.getLogger(__name__)

CALIB_SEED_OFFSET = 20_000
EVAL_SEED_OFFSET = 10_000
VARIANTS = {
    "baseline": dict(omq=False, trd=False),
    "+omq": dict(omq=True, trd=False),
    "+trd": dict(omq=False, trd=True),
    "mpq-dm": dict(omq=True, trd=True),
}


def schedule(cfg: RunConfig):
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def train_teacher(cfg: RunConfig):
    data = two_gaussians(cfg.dataset_size, cfg.dataset_sigma, cfg.seed)
    model = ToyDenoiser.init(cfg.seed, 2, cfg.hidden, cfg.temb_dim)
    return train_fp(model, data, cfg.fp_train_config(), schedule(cfg))


def plant_outliers(model: ToyDenoiser, fraction: float = 0.1, sigma: float = 8.0, seed: int = 0):
    """Add a +/- ``sigma``-std outlier pair to ``ceil(fraction * c_out)`` rows of each hidden layer.

    Returns the planted row indices per layer.
    """
    rng = np.random.default_rng(seed)
    planted = {}
    for name in HIDDEN_LAYERS:
        W = model.params[f"{name}.W"]
        n_out, n_in = W.shape
        rows = np.sort(rng.choice(n_out, math.ceil(round(fraction * n_out, 9)), replace=False))
        for r in rows:
            cols = rng.choice(n_in, 2, replace=False)
            std = W[r].std()
            W[r, cols[0]] = W[r].mean() + sigma * std
            W[r, cols[1]] = W[r].mean() - sigma * std
        planted[name] = rows.tolist()
    return planted


@dataclass
class Calibration:
    """Per-layer FP activations: the full pool and the seeded objective batch."""

    pool: dict[str, np.ndarray]
    batch: dict[str, np.ndarray]


def calibration_states(fp: ToyDenoiser, cfg: RunConfig):
    """FP reverse-chain states ``x_T .. x_0`` that calibration is collected on."""
    rng = np.random.default_rng(cfg.seed + CALIB_SEED_OFFSET)
    seed = int(rng.integers(0, 2 ** 31))
    states, _, _ = run_trajectory(fp, schedule(cfg), cfg.calib_batch, seed, "fp")
    return states, rng


def calibrate(fp: ToyDenoiser, cfg: RunConfig) -> Calibration:
    sched = schedule(cfg)
    states, noise = calibration_states(fp, cfg)
    pool = {name: [] for name in LAYERS}
    for j, t in enumerate(range(sched.T, 0, -1)):
        _, _, cache = forward_with_cache(fp, states[j], t, "fp")
        inp, _, h1, _, h2 = cache[:5]
        pool["fc1"].append(inp)
        pool["fc2"].append(h1)
        pool["proj"].append(h2)
    pool = {k: np.concatenate(v) for k, v in pool.items()}
    rows = noise.choice(len(pool["fc1"]), min(cfg.calib_samples, len(pool["fc1"])), replace=False)
    rows.sort()
    return Calibration(pool, {k: v[rows] for k, v in pool.items()})


def _act_params(X, bits: int, percentile) -> QuantParams:
    return compute_quant_params(X, bits, percentile)


def quantize_model(
    fp: ToyDenoiser,
    calib: Calibration,
    cfg: RunConfig,
    omq: bool | None = None,
    seed: int | None = None,
    proj_bits: int = PROJ_BITS,
    weight_bits: int | None = None,
    act_bits: int | None = None,
    act_range="percentile",
):
    """Build the fake-quantized student and the per-layer OMQ record.

    Hidden layers get the target bit-width (mixed when ``omq``), the final
    projection ``proj_bits`` for weights and activations.
    """
    omq = cfg.omq if omq is None else omq
    seed = cfg.seed if seed is None else seed
    wbits = cfg.weight_bits if weight_bits is None else weight_bits
    abits = cfg.act_bits if act_bits is None else act_bits
    percentile = cfg.act_percentile if act_range == "percentile" else act_range
    rng = np.random.default_rng(seed + 1)
    q = fp.copy()
    q.quant = {}
    records = {}
    for name in LAYERS:
        W = fp.params[f"{name}.W"]
        n_out, n_in = W.shape
        X_pool, X_batch = calib.pool[name], calib.batch[name]
        lora = LoraAdapter.init(n_out, n_in, min(cfg.lora_rank, n_out, n_in), rng)
        if name == "proj":
            delta = np.ones(n_in)
            act = _act_params(X_pool, proj_bits, percentile)
            alloc = ChannelBitAllocation.uniform(n_out, proj_bits)
        else:
            delta = compute_smooth_factors(W, X_pool) if omq else np.ones(n_in)
            W_hat, X_hat_pool = apply_smoothing(W, X_pool, delta)
            act = _act_params(X_hat_pool, abits, percentile)
            if omq:
                _, X_hat = apply_smoothing(W, X_batch, delta)
                alloc = allocate_bits(
                    W_hat, X_hat, wbits, resolve_group_size(n_out, cfg.group_size),
                    cfg.plus_fraction, act_params=act, reference=X_batch @ W.T,
                    selection=cfg.selection, seed=seed,
                )
            else:
                alloc = ChannelBitAllocation.uniform(n_out, wbits)
            records[name] = {
                "kurtosis": channel_kurtosis(W_hat),
                "m": alloc.m,
                "group_size": alloc.group_size,
                "promoted": list(alloc.promoted),
                "demoted": list(alloc.demoted),
                "plus_extra": alloc.plus_extra,
                "objectives": {str(k): v for k, v in alloc.objectives.items()},
                "bits": alloc.bits.tolist(),
            }
        q.quant[name] = QuantLayer.fit(W, alloc.bits, delta, act, lora)
    return q, records


def size_layers(q: ToyDenoiser) -> dict[str, tuple[list[int], int]]:
    return {name: (layer.bits.tolist(), q.params[f"{name}.W"].shape[1]) for name, layer in q.quant.items()}


def size_summary(q: ToyDenoiser) -> dict:
    layers = size_layers(q)
    return {
        "payload_bits": payload_bits(layers),
        "overhead_bytes": overhead_bytes(layers),
        "model_size_bytes": model_size_bytes(layers),
        "fp_size_bytes": fp_size_bytes(layers),
    }


def eval_seeds(cfg: RunConfig, count: int | None = None) -> list[int]:
    count = cfg.eval_seeds if count is None else count
    return [EVAL_SEED_OFFSET + cfg.seed * 1000 + i for i in range(count)]


def evaluate(fp: ToyDenoiser, q: ToyDenoiser, cfg: RunConfig, seeds=None) -> list[dict]:
    """One row per seed: trajectory MSE, final-sample MSE, output SQNR and mode coverage."""
    sched = schedule(cfg)
    rows = []
    for s in eval_seeds(cfg) if seeds is None else seeds:
        sf, _, of = run_trajectory(fp, sched, cfg.eval_batch, s, "fp")
        sq, _, oq = run_trajectory(q, sched, cfg.eval_batch, s, "quantized")
        rows.append({
            "seed": int(s),
            "trajectory_mse": trajectory_mse(sf, sq),
            "sample_mse": float(np.mean((sf[-1] - sq[-1]) ** 2)),
            "output_sqnr_db": float(sqnr_db(of, oq)),
            "fp_coverage": mode_coverage(sf[-1], cfg.dataset_sigma),
            "q_coverage": mode_coverage(sq[-1], cfg.dataset_sigma),
        })
    return rows


def run_variant(fp: ToyDenoiser, calib: Calibration, cfg: RunConfig, omq: bool, trd: bool, seed: int):
    """Quantize and fine-tune one ablation variant; returns ``(q, records, losses)``."""
    q, records = quantize_model(fp, calib, cfg, omq=omq, seed=seed)
    tc = cfg.finetune_config()
    tc.seed = seed
    tc.distill_metric = cfg.distill_metric if trd else "none"
    q, losses = finetune_quantized(fp, q, tc, schedule(cfg))
    return q, records, losses


def run_pipeline(cfg: RunConfig) -> tuple[RunReport, dict]:
    """Train teacher, calibrate, allocate, fine-tune, evaluate; returns the report and models."""
    timings = {}
    t0 = time.perf_counter()
    fp, fp_losses = train_teacher(cfg)
    planted = plant_outliers(fp, cfg.outlier_fraction, cfg.outlier_sigma, cfg.seed) if cfg.plant_outliers else {}
    timings["train_fp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    calib = calibrate(fp, cfg)
    timings["calibrate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    q, records, ft_losses = run_variant(fp, calib, cfg, cfg.omq, cfg.trd, cfg.seed)
    timings["finetune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows = evaluate(fp, q, cfg)
    timings["eval"] = time.perf_counter() - t0

    report = build_report(cfg, records, fp_losses, ft_losses, rows, q, timings, planted=planted)
    return report, {"fp": fp, "q": q, "calib": calib}


def build_report(cfg, records, fp_losses, ft_losses, rows, q, timings, **extra) -> RunReport:
    return RunReport(
        config=cfg.to_dict(),
        backend=kernels.BACKEND,
        kurtosis={k: _plain(v["kurtosis"]) for k, v in records.items()},
        allocation=_plain({k: {kk: vv for kk, vv in v.items() if kk != "kurtosis"} for k, v in records.items()}),
        fp_loss_curve=_plain(np.asarray(fp_losses)) if fp_losses is not None else [],
        finetune_loss_curve=_plain(np.asarray(ft_losses)) if ft_losses is not None else [],
        eval_rows=_plain(rows),
        size=size_summary(q),
        extra=_plain({"lambda": cfg.lam, "alpha": cfg.lam, **extra}),
        timings=timings,
    )


def median_trajectory_mse(rows) -> float:
    return float(np.median([r["trajectory_mse"] for r in rows]))


# -- checkpoints ------------------------------------------------------------


def model_entries(model: ToyDenoiser) -> dict[str, np.ndarray]:
    out = {k: v.astype(np.float64) for k, v in model.params.items()}
    out["meta.dims"] = np.array([model.data_dim, model.hidden, model.temb_dim], dtype=np.int64)
    if model.quant:
        for name, layer in model.quant.items():
            out[f"{name}.q.bits"] = layer.bits.astype(np.uint8)
            out[f"{name}.q.delta"] = layer.delta
            out[f"{name}.q.w_scale"] = layer.w_scale
            out[f"{name}.q.w_lower"] = layer.w_lower
            out[f"{name}.q.act"] = np.array([layer.act_bits, layer.act_scale, layer.act_lower])
            out[f"{name}.q.lora_B"] = layer.lora.B
            out[f"{name}.q.lora_A"] = layer.lora.A
    return out


def model_from_entries(entries: dict[str, np.ndarray]) -> ToyDenoiser:
    try:
        data_dim, hidden, temb = (int(v) for v in entries["meta.dims"])
        params = {k: entries[k].astype(np.float64) for k in
                  (f"{n}.{p}" for n in LAYERS for p in ("W", "b"))}
    except KeyError as exc:
        raise ValueError(f"checkpoint missing entry {exc}") from None
    model = ToyDenoiser(params, data_dim, hidden, temb)
    if "fc1.q.bits" in entries:
        model.quant = {}
        for name in LAYERS:
            act = entries[f"{name}.q.act"]
            model.quant[name] = QuantLayer(
                bits=entries[f"{name}.q.bits"].astype(np.int64),
                delta=entries[f"{name}.q.delta"].copy(),
                w_scale=entries[f"{name}.q.w_scale"].copy(),
                w_lower=entries[f"{name}.q.w_lower"].copy(),
                act_bits=int(act[0]),
                act_scale=float(act[1]),
                act_lower=float(act[2]),
                lora=LoraAdapter(entries[f"{name}.q.lora_B"].copy(), entries[f"{name}.q.lora_A"].copy()),
            )
    return model
