"""Run reports, CSV sidecars and model-size accounting."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
# f32 scale + u16 zero-point per weight channel, the same per activation quantizer
CHANNEL_OVERHEAD_BYTES = 6
ACT_OVERHEAD_BYTES = 6
FP_BITS = 32


def payload_bits(layers: Mapping[str, tuple[Sequence[int], int]]) -> int:
    """Total weight bits; ``layers`` maps name to ``(bits per output channel, c_in)``."""
    return int(sum(int(np.sum(np.asarray(bits, dtype=np.int64))) * c_in for bits, c_in in layers.values()))


def overhead_bytes(layers: Mapping[str, tuple[Sequence[int], int]]) -> int:
    return sum(len(bits) * CHANNEL_OVERHEAD_BYTES + ACT_OVERHEAD_BYTES for bits, _ in layers.values())


def model_size_bytes(layers: Mapping[str, tuple[Sequence[int], int]]) -> int:
    return math.ceil(payload_bits(layers) / 8) + overhead_bytes(layers)


def fp_size_bytes(layers: Mapping[str, tuple[Sequence[int], int]]) -> int:
    return sum(len(bits) * c_in for bits, c_in in layers.values()) * FP_BITS // 8


@dataclass
class RunReport:
    config: dict = field(default_factory=dict)
    backend: str = ""
    kurtosis: dict[str, list[float]] = field(default_factory=dict)
    allocation: dict[str, dict] = field(default_factory=dict)
    fp_loss_curve: list[float] = field(default_factory=list)
    finetune_loss_curve: list[float] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    size: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("timings")
        return d

    def dumps(self, timings: bool = True) -> str:
        return json.dumps(_plain(self.to_dict(timings)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def write_csvs(self, directory) -> list[Path]:
        """Flat CSV series for plotting; returns the written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        series = {
            "fp_loss.csv": (["step", "loss"], enumerate(self.fp_loss_curve)),
            "finetune_loss.csv": (["step", "loss"], enumerate(self.finetune_loss_curve)),
        }
        for name, (header, rows) in series.items():
            written.append(_write_csv(directory / name, header, rows))
        if self.eval_rows:
            header = list(self.eval_rows[0])
            written.append(_write_csv(directory / "eval.csv", header,
                                      ([r[h] for h in header] for r in self.eval_rows)))
        krows = [(layer, i, k) for layer, ks in self.kurtosis.items() for i, k in enumerate(ks)]
        written.append(_write_csv(directory / "kurtosis.csv", ["layer", "channel", "kurtosis"], krows))
        orows = [(layer, m, v) for layer, a in self.allocation.items()
                 for m, v in a.get("objectives", {}).items()]
        written.append(_write_csv(directory / "objectives.csv", ["layer", "m", "objective"], orows))
        return written


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write_csv(path: Path, header, rows) -> Path:
    path.write_text(csv_text(header, rows), encoding="utf-8", newline="")
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _plain(obj):
    """Convert numpy scalars/arrays and non-string keys into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj
