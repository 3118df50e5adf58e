"""Command-line interface: ``mpqdm <subcommand> [options]``.

Every subcommand works inside a run directory (``--workdir``) that holds the
effective config and the ``.mpqt`` checkpoints written by earlier steps::

    train-fp -> fp.mpqt -> calibrate -> calib.mpqt -> allocate -> quant.mpqt
             -> finetune -> finetuned.mpqt -> eval / sample / report

``run`` does all of it in one go. Exit codes: 0 success, 1 runtime error,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .config import RunConfig
from .container import load_container, save_container
from .diffusion import HIDDEN_LAYERS, LAYERS, finetune_quantized, sample_trajectory
from .omq import rank_channels_by_kurtosis
from .report import RunReport, _plain, csv_text

CONFIG = "config.json"
FP = "fp.mpqt"
CALIB = "calib.mpqt"
QUANT = "quant.mpqt"
TUNED = "finetuned.mpqt"
ALLOC = "allocation.json"
EVAL_CSV = "eval.csv"
EVAL_JSON = "eval.json"
TIMINGS = "timings.json"
REPORT = "report.json"

# flag -> config key
OVERRIDES = {
    "weight_bits": "weight_bits",
    "act_bits": "act_bits",
    "group_size": "group_size",
    "plus_fraction": "plus_fraction",
    "selection": "selection",
    "smooth_steps": "smooth_steps",
    "lam": "lam",
    "seed": "seed",
    "ft_steps": "ft_steps",
    "fp_steps": "fp_steps",
}


class CliError(RuntimeError):
    pass


def _group_size(text: str):
    return text if text == "auto" else int(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="mpqdm-run", help="run directory (default: %(default)s)")
    common.add_argument("--config", help="JSON config; defaults to <workdir>/config.json if present")
    common.add_argument("--weight-bits", type=int, dest="weight_bits")
    common.add_argument("--act-bits", type=int, dest="act_bits")
    common.add_argument("--group-size", type=_group_size, dest="group_size", help="'auto' or an integer")
    common.add_argument("--plus-fraction", type=float, dest="plus_fraction")
    common.add_argument("--selection", choices=("kurtosis", "random", "head-tail"))
    common.add_argument("--smooth-steps", type=int, dest="smooth_steps")
    common.add_argument("--lambda", type=float, dest="lam")
    common.add_argument("--seed", type=int)
    common.add_argument("--ft-steps", type=int, dest="ft_steps")
    common.add_argument("--fp-steps", type=int, dest="fp_steps")

    p = argparse.ArgumentParser(prog="mpqdm", description="Mixed-precision quantization of a toy diffusion model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("train-fp", parents=[common], help="train the full-precision teacher")
    sub.add_parser("calibrate", parents=[common], help="collect activation statistics")
    sub.add_parser("allocate", parents=[common], help="smooth, rank and allocate bits; prints per-layer allocation")
    sub.add_parser("finetune", parents=[common], help="LoRA/scale fine-tuning with relation distillation")
    s = sub.add_parser("sample", parents=[common], help="draw samples as CSV")
    s.add_argument("--model", choices=("fp", "quantized"), default="quantized")
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--sample-seed", type=int, default=0, dest="sample_seed")
    s.add_argument("--out", help="CSV path (default: stdout)")
    e = sub.add_parser("eval", parents=[common], help="per-seed trajectory MSE, SQNR and coverage as CSV")
    e.add_argument("--seeds", type=int, help="number of evaluation seeds (default: config eval_seeds)")
    r = sub.add_parser("report", parents=[common], help="write the run report and CSV sidecars")
    r.add_argument("--out", help="directory for report.json and CSVs (default: <workdir>/report)")
    r.add_argument("--print", action="store_true", dest="print_json", help="also print the report JSON")
    run = sub.add_parser("run", parents=[common], help="full pipeline, then report")
    run.add_argument("--out", help="directory for report.json and CSVs (default: <workdir>/report)")
    return p


# -- helpers ----------------------------------------------------------------


def _config(args) -> RunConfig:
    work = Path(args.workdir)
    if args.config:
        cfg = RunConfig.load(args.config)
    elif (work / CONFIG).exists():
        cfg = RunConfig.load(work / CONFIG)
    else:
        cfg = RunConfig()
    d = cfg.to_dict()
    d["lam"] = d.pop("lambda")
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    cfg = RunConfig(**d)
    work.mkdir(parents=True, exist_ok=True)
    cfg.save(work / CONFIG)
    return cfg


def _need(work: Path, name: str, step: str) -> Path:
    path = work / name
    if not path.exists():
        raise CliError(f"missing {path}; run `mpqdm {step}` first")
    return path


def _load_model(work: Path, name: str, step: str):
    entries = load_container(_need(work, name, step))
    return pipeline.model_from_entries(entries), entries


def _student(work: Path):
    if (work / TUNED).exists():
        return _load_model(work, TUNED, "finetune")
    return _load_model(work, QUANT, "allocate")


def _save_model(path: Path, model, **extra) -> None:
    entries = pipeline.model_entries(model)
    entries.update(extra)
    save_container(path, entries)


def _planted(entries) -> dict[str, list[int]]:
    return {n: entries[f"planted.{n}"].tolist() for n in HIDDEN_LAYERS if f"planted.{n}" in entries}


def _record_time(work: Path, step: str, seconds: float) -> None:
    path = work / TIMINGS
    t = json.loads(path.read_text()) if path.exists() else {}
    t[step] = seconds
    path.write_text(json.dumps(t, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_report(report: RunReport, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / REPORT)
    report.write_csvs(out)
    return out / REPORT


def _summary(report: RunReport) -> str:
    med = pipeline.median_trajectory_mse(report.eval_rows) if report.eval_rows else float("nan")
    size = report.size
    return (f"{report.config['weight_bits']}/{report.config['act_bits']} bits, "
            f"median trajectory MSE {med:.6g}, model size {size.get('model_size_bytes')} B "
            f"(FP {size.get('fp_size_bytes')} B)")


# -- subcommands ------------------------------------------------------------


def cmd_train_fp(args, cfg: RunConfig, work: Path) -> None:
    t0 = time.perf_counter()
    fp, losses = pipeline.train_teacher(cfg)
    extra = {"train.loss": np.asarray(losses, dtype=np.float64)}
    if cfg.plant_outliers:
        planted = pipeline.plant_outliers(fp, cfg.outlier_fraction, cfg.outlier_sigma, cfg.seed)
        for name, rows in planted.items():
            extra[f"planted.{name}"] = np.asarray(rows, dtype=np.int64)
            print(f"planted {cfg.outlier_sigma:g}-sigma outliers in {name} rows {rows}")
    _save_model(work / FP, fp, **extra)
    _record_time(work, "train_fp", time.perf_counter() - t0)
    print(f"trained FP teacher for {cfg.fp_steps} steps, final loss {losses[-1]:.5f} -> {work / FP}")


def cmd_calibrate(args, cfg: RunConfig, work: Path) -> None:
    t0 = time.perf_counter()
    fp, _ = _load_model(work, FP, "train-fp")
    calib = pipeline.calibrate(fp, cfg)
    entries = {f"pool.{n}": v for n, v in calib.pool.items()}
    entries.update({f"batch.{n}": v for n, v in calib.batch.items()})
    save_container(work / CALIB, entries)
    _record_time(work, "calibrate", time.perf_counter() - t0)
    for n in LAYERS:
        X = calib.pool[n]
        print(f"{n}: {X.shape[0]} rows x {X.shape[1]} channels, range [{X.min():.4g}, {X.max():.4g}], "
              f"p{cfg.act_percentile:g} |x| {np.percentile(np.abs(X), cfg.act_percentile):.4g}")
    print(f"objective batch: {len(calib.batch['fc1'])} rows -> {work / CALIB}")


def _load_calibration(work: Path) -> pipeline.Calibration:
    e = load_container(_need(work, CALIB, "calibrate"))
    try:
        return pipeline.Calibration({n: e[f"pool.{n}"] for n in LAYERS}, {n: e[f"batch.{n}"] for n in LAYERS})
    except KeyError as exc:
        raise CliError(f"calibration file lacks entry {exc}") from None


def allocation_echo(fp, q, records, planted) -> tuple[list[str], dict]:
    """Human-readable allocation lines plus the cross-check against the kurtosis ranking."""
    lines, checks = [], {}
    for name in HIDDEN_LAYERS:
        r = records[name]
        W_hat = fp.params[f"{name}.W"] / q.quant[name].delta
        ranking = rank_channels_by_kurtosis(W_hat).tolist()
        n, up, down = len(ranking), r["m"] * r["group_size"] + r["plus_extra"], r["m"] * r["group_size"]
        consistent = (set(r["promoted"]) == set(ranking[:up])
                      and set(r["demoted"]) == set(ranking[n - down:] if down else []))
        lines.append(f"{name}: k={r['group_size']} m={r['m']} extra={r['plus_extra']} "
                     f"promoted={r['promoted']} demoted={r['demoted']}")
        lines.append(f"  kurtosis ranking check: {'ok' if consistent else 'MISMATCH'} (top {ranking[:max(up, 1)]})")
        check = {"consistent": consistent, "ranking": ranking}
        if name in planted:
            rows = planted[name]
            ranks = [ranking.index(i) for i in rows]
            hit = sorted(set(rows) & set(r["promoted"]))
            lines.append(f"  planted={rows} kappa-ranks={ranks} promoted-planted={len(hit)}/{len(rows)} {hit}")
            check.update(planted=rows, planted_ranks=ranks, planted_promoted=hit)
        checks[name] = check
    lines.append(f"proj: {q.quant['proj'].bits[0]} bits (fixed)")
    return lines, checks


def cmd_allocate(args, cfg: RunConfig, work: Path) -> None:
    t0 = time.perf_counter()
    fp, fp_entries = _load_model(work, FP, "train-fp")
    calib = _load_calibration(work)
    q, records = pipeline.quantize_model(fp, calib, cfg, omq=cfg.omq)
    planted = _planted(fp_entries)
    lines, checks = allocation_echo(fp, q, records, planted)
    _save_model(work / QUANT, q)
    _write_json(work / ALLOC, {"records": records, "checks": checks, "planted": planted})
    _record_time(work, "allocate", time.perf_counter() - t0)
    print(f"allocation at W{cfg.weight_bits} (target), A{cfg.act_bits}, "
          f"group size {cfg.group_size}, plus fraction {cfg.plus_fraction:g}")
    print("\n".join(lines))
    print(f"model size {pipeline.size_summary(q)['model_size_bytes']} B -> {work / QUANT}")


def cmd_finetune(args, cfg: RunConfig, work: Path) -> None:
    t0 = time.perf_counter()
    fp, _ = _load_model(work, FP, "train-fp")
    q, _ = _load_model(work, QUANT, "allocate")
    q, losses = finetune_quantized(fp, q, cfg.finetune_config(), pipeline.schedule(cfg))
    _save_model(work / TUNED, q, **{"train.loss": np.asarray(losses, dtype=np.float64)})
    _record_time(work, "finetune", time.perf_counter() - t0)
    if len(losses):
        print(f"fine-tuned {len(losses)} steps: loss {losses[0]:.5g} -> {losses[-1]:.5g} -> {work / TUNED}")
    else:
        print(f"no fine-tuning steps; saved -> {work / TUNED}")


def cmd_sample(args, cfg: RunConfig, work: Path) -> None:
    model, _ = _load_model(work, FP, "train-fp") if args.model == "fp" else _student(work)
    samples, _ = sample_trajectory(model, pipeline.schedule(cfg), args.batch, args.sample_seed, args.model)
    text = csv_text(["x", "y"], samples.tolist())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def cmd_eval(args, cfg: RunConfig, work: Path) -> None:
    t0 = time.perf_counter()
    fp, _ = _load_model(work, FP, "train-fp")
    q, _ = _student(work)
    rows = pipeline.evaluate(fp, q, cfg, seeds=pipeline.eval_seeds(cfg, args.seeds))
    text = csv_text(list(rows[0]), ([r[k] for k in rows[0]] for r in rows))
    (work / EVAL_CSV).write_text(text, encoding="utf-8", newline="")
    _write_json(work / EVAL_JSON, rows)
    _record_time(work, "eval", time.perf_counter() - t0)
    sys.stdout.write(text)


def cmd_report(args, cfg: RunConfig, work: Path) -> None:
    _, fp_entries = _load_model(work, FP, "train-fp")
    q, q_entries = _student(work)
    alloc = json.loads(_need(work, ALLOC, "allocate").read_text())
    rows = json.loads(_need(work, EVAL_JSON, "eval").read_text())
    timings = json.loads((work / TIMINGS).read_text()) if (work / TIMINGS).exists() else {}
    report = pipeline.build_report(
        cfg, alloc["records"], fp_entries.get("train.loss"), q_entries.get("train.loss"), rows, q, timings,
        planted=alloc["planted"], allocation_checks=alloc["checks"])
    path = _write_report(report, Path(args.out) if args.out else work / "report")
    if args.print_json:
        sys.stdout.write(report.dumps())
    print(f"report: {_summary(report)} -> {path}")


def cmd_run(args, cfg: RunConfig, work: Path) -> None:
    report, models = pipeline.run_pipeline(cfg)
    fp, q = models["fp"], models["q"]
    _save_model(work / FP, fp, **{"train.loss": np.asarray(report.fp_loss_curve)})
    _save_model(work / TUNED, q, **{"train.loss": np.asarray(report.finetune_loss_curve)})
    path = _write_report(report, Path(args.out) if args.out else work / "report")
    print(f"run: {_summary(report)} -> {path}")


COMMANDS = {
    "train-fp": cmd_train_fp,
    "calibrate": cmd_calibrate,
    "allocate": cmd_allocate,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg, Path(args.workdir))
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"mpqdm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
