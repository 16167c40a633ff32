"""Robust accuracy, bottom-k aggregation, report files and SVG bar charts."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, run_attack
from .causal import bottom_k_classes
from .datasets import LabeledDataset
from .errors import ContractError
from .models import Classifier

REPORT_SCHEMA_VERSION = 1
BOTTOM_KS = (10, 30, 50)
SHARD_SIZE = 256


@dataclass
class AccuracyResult:
    overall: float
    per_class: list
    counts: list

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_class": list(self.per_class), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, blob: dict) -> "AccuracyResult":
        return cls(blob["overall"], list(blob["per_class"]), list(blob["counts"]))


def _accuracy_from_hits(hits: np.ndarray, labels: np.ndarray, d: int) -> AccuracyResult:
    counts = np.bincount(labels, minlength=d)
    correct = np.bincount(labels, weights=hits.astype(np.float64), minlength=d)
    per_class = np.where(counts > 0, correct / np.maximum(counts, 1), 0.0)
    return AccuracyResult(float(hits.mean()), per_class.tolist(), counts.tolist())


def robust_accuracy(model: Classifier, dataset: LabeledDataset, attack: str | None = "pgd",
                    config: AttackConfig | None = None, threads: int = 1) -> AccuracyResult:
    """Accuracy under ``attack`` (None means clean), overall and per true class.

    The dataset is processed in fixed shards with per-sample derived attack
    seeds, so the result does not depend on ``threads``.
    """
    if len(dataset) == 0:
        raise ContractError("robust_accuracy: empty dataset")
    x, y = dataset.inputs, dataset.labels
    starts = list(range(0, len(y), SHARD_SIZE))

    def shard(start, m=model):
        xs, ys = x[start:start + SHARD_SIZE], y[start:start + SHARD_SIZE]
        if attack is not None:
            xs = run_attack(attack, m, xs, ys, config or AttackConfig(), sample_offset=start)
        return m.predict(xs) == ys

    if threads > 1 and len(starts) > 1:
        # each worker attacks its own snapshot; tapes are thread-local
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: shard(s, model.copy()), starts))
    else:
        parts = [shard(s) for s in starts]
    return _accuracy_from_hits(np.concatenate(parts), y, dataset.num_classes)


def bottom_k_cumulative(per_class_acc, k_percent: float) -> float:
    """Mean accuracy of the ceil(k% * d) worst classes."""
    acc = np.asarray(per_class_acc, dtype=np.float64)
    return float(np.mean(acc[bottom_k_classes(acc, k_percent)]))


@dataclass
class RobustnessReport:
    model_id: str
    dataset_id: str
    clean: AccuracyResult
    attacks: dict = field(default_factory=dict)
    bottom_k: dict = field(default_factory=dict)
    relative_ratio: dict | None = None
    settings: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.clean.per_class)

    def to_dict(self) -> dict:
        blob = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "clean": self.clean.to_dict(),
            "attacks": {k: v.to_dict() for k, v in self.attacks.items()},
            "bottom_k": self.bottom_k,
            "settings": self.settings,
        }
        if self.relative_ratio is not None:
            blob["relative_ratio"] = self.relative_ratio
        return blob

    @classmethod
    def from_dict(cls, blob: dict) -> "RobustnessReport":
        if blob.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ContractError(f"unsupported report schema {blob.get('schema_version')!r}")
        return cls(blob["model_id"], blob["dataset_id"], AccuracyResult.from_dict(blob["clean"]),
                   {k: AccuracyResult.from_dict(v) for k, v in blob["attacks"].items()},
                   blob.get("bottom_k", {}), blob.get("relative_ratio"), blob.get("settings", {}))


def build_report(model: Classifier, dataset: LabeledDataset, attacks: dict[str, AttackConfig],
                 model_id: str, dataset_id: str, threads: int = 1, ks: Sequence[float] = BOTTOM_KS,
                 settings: dict | None = None) -> RobustnessReport:
    clean = robust_accuracy(model, dataset, None, threads=threads)
    results = {name: robust_accuracy(model, dataset, name, cfg, threads) for name, cfg in attacks.items()}
    bottom = {name: {f"bottom_{k:g}": bottom_k_cumulative(res.per_class, k) for k in ks}
              for name, res in {"clean": clean, **results}.items()}
    return RobustnessReport(model_id, dataset_id, clean, results, bottom, None, dict(settings or {}))


CSV_HEADER = ["schema_version", "model_id", "attack", "row", "accuracy", "count"]


def report_csv(report: RobustnessReport) -> str:
    """One row per (attack, class), clean first, then overall and bottom-k summary rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    sections = {"clean": report.clean, **report.attacks}
    for name, res in sections.items():
        for k, (acc, count) in enumerate(zip(res.per_class, res.counts)):
            w.writerow([REPORT_SCHEMA_VERSION, report.model_id, name, f"class_{k}", repr(float(acc)), count])
    for name, res in sections.items():
        w.writerow([REPORT_SCHEMA_VERSION, report.model_id, name, "overall", repr(float(res.overall)),
                    sum(res.counts)])
        for key, value in report.bottom_k.get(name, {}).items():
            w.writerow([REPORT_SCHEMA_VERSION, report.model_id, name, key, repr(float(value)), ""])
    for key, value in (report.relative_ratio or {}).items():
        w.writerow([REPORT_SCHEMA_VERSION, report.model_id, "rho", key, repr(float(value)), ""])
    return buf.getvalue()


def emit_report(report: RobustnessReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ContractError(f"emit_report: unknown format {fmt!r}")
    if not path.parent.is_dir():
        raise FileNotFoundError(f"emit_report: directory does not exist: {path.parent}")
    path.write_text(text)
    return path


def load_report(path) -> RobustnessReport:
    return RobustnessReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- SVG

PALETTE = ["#4e79a7", "#e15759", "#59a14f", "#f28e2b", "#b07aa1", "#76b7b2", "#9c755f", "#edc948"]


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def render_bar_svg(series: dict[str, Sequence[float]], labels: Sequence[str], title: str = "",
                   y_label: str = "accuracy") -> str:
    """Grouped bar chart of values in [0, 1]: one group per label, one bar per series."""
    if not series or not labels:
        raise ContractError("emit_plot_svg: empty series")
    for name, values in series.items():
        if len(values) != len(labels):
            raise ContractError(f"emit_plot_svg: series {name!r} has {len(values)} values for {len(labels)} labels")
        for v in values:
            if not (0.0 <= float(v) <= 1.0) or math.isnan(float(v)):
                raise ContractError(f"emit_plot_svg: value {v!r} in series {name!r} outside [0, 1]")

    n_groups, n_series = len(labels), len(series)
    left, right, top, bottom = 70, 160, 50, 70
    group_w = max(40, 16 * n_series + 16)
    width = left + right + group_w * n_groups
    height = 380
    plot_h = height - top - bottom
    y0 = height - bottom
    bar_w = (group_w - 16) / n_series

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif">',
           f'<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="28" text-anchor="middle" font-size="16">{_esc(title)}</text>')
    for i in range(6):
        v = i / 5
        y = y0 - v * plot_h
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - right}" y2="{y:.1f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{v:.1f}</text>')
    out.append(f'<line x1="{left}" y1="{y0}" x2="{width - right}" y2="{y0}" stroke="#000000"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{y0}" stroke="#000000"/>')
    out.append(f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 18 {top + plot_h / 2:.1f})">{_esc(y_label)}</text>')

    for g, label in enumerate(labels):
        gx = left + g * group_w + 8
        for s, (name, values) in enumerate(series.items()):
            v = float(values[g])
            h = v * plot_h
            out.append(f'<rect class="bar" x="{gx + s * bar_w:.2f}" y="{y0 - h:.2f}" width="{bar_w:.2f}" '
                       f'height="{h:.2f}" fill="{PALETTE[s % len(PALETTE)]}"><title>{_esc(name)} '
                       f'{_esc(label)}: {v:.4f}</title></rect>')
        cx = left + g * group_w + group_w / 2
        out.append(f'<text x="{cx:.1f}" y="{y0 + 16}" text-anchor="middle" font-size="11">{_esc(label)}</text>')

    lx = width - right + 16
    for s, name in enumerate(series):
        ly = top + 18 * s
        out.append(f'<rect class="legend" x="{lx}" y="{ly}" width="12" height="12" '
                   f'fill="{PALETTE[s % len(PALETTE)]}"/>')
        out.append(f'<text x="{lx + 18}" y="{ly + 10}" font-size="12">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot_svg(series: dict[str, Sequence[float]], labels: Sequence[str], path, title: str = "",
                  y_label: str = "accuracy") -> Path:
    text = render_bar_svg(series, labels, title, y_label)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"emit_plot_svg: directory does not exist: {path.parent}")
    path.write_text(text)
    return path
