"""File-based pipeline stages behind the command-line verbs.

Every stage reads its inputs from, and writes its outputs under, one output
directory::

    data/dataset.json            gen-data
    checkpoints/<kind>.json      train
    history/<kind>.csv           train (one row per epoch)
    attacks/<ckpt>_<attack>.*    attack (flip statistics + adversarial inputs)
    theta/<ckpt>.json            estimate-theta
    reports/<ckpt>.{json,csv}    report, plus per-class and bottom-k SVGs
    ablation/ablation.{json,csv} ablate

Stages only depend on the config and on files written by earlier stages, so
reruns with the same config and seed reproduce every file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack, select_worst
from .causal import CausalEstimate, approx_propensity, estimate_theta, pool_observed_flip, relative_ratio
from .config import ExperimentConfig
from .datasets import DatasetPair, gen_synthetic, load_csv, load_datasets, load_idx, save_datasets, split_dataset
from .defenses import DefenseConfig, train_adml, train_at
from .errors import ConfigError, ContractError
from .models import Classifier, init_classifier, load_checkpoint, save_checkpoint
from .report import bottom_k_cumulative, build_report, robust_accuracy, emit_plot_svg, emit_report

log = logging.getLogger(__name__)

DATASET_FILE = Path("data") / "dataset.json"
HISTORY_COLUMNS = ["epoch", "clean_acc", "pgd_acc", "loss", "lr"]
ABLATION_COLUMNS = ["use_split_crossfit", "treatment_set", "clean", "pgd_overall", "pgd_bottom_30"]


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dump_json(blob) -> str:
    return json.dumps(blob, sort_keys=True, indent=1) + "\n"


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_dataset_pair(out: Path) -> DatasetPair:
    return load_datasets(_require(Path(out) / DATASET_FILE, "dataset (run gen-data first)"))


def dataset_id(out: Path) -> str:
    digest = hashlib.sha256((Path(out) / DATASET_FILE).read_bytes()).hexdigest()
    return f"sha256:{digest[:16]}"


def _attack(config: ExperimentConfig, name: str) -> AttackConfig:
    if name not in config.attacks:
        raise ConfigError(f"no [attack.{name}] section; known: {', '.join(sorted(config.attacks)) or 'none'}")
    return config.attacks[name]


# ---------------------------------------------------------------- stages

def gen_data(config: ExperimentConfig, out) -> Path:
    data = config.data
    if data.synthetic is not None:
        pair = gen_synthetic(data.synthetic)
    else:
        num_classes = config.model.num_classes
        if data.images_path is not None:
            full = load_idx(data.images_path, data.labels_path, num_classes)
        else:
            full = load_csv(data.csv_path, data.label_column, num_classes)
        pair = split_dataset(full, data.test_ratio, data.seed)
    path = Path(out) / DATASET_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    return save_datasets(pair, path)


def _history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def _defense_for(config: ExperimentConfig, **changes) -> DefenseConfig:
    fields = dict(config.defense.__dict__)
    fields.update(changes)
    return DefenseConfig(**fields)


def train(config: ExperimentConfig, out, defense: str = "at", checkpoint=None) -> Path:
    """Train a fresh AT/TRADES model, or fine-tune ``checkpoint`` with ADML."""
    out = Path(out)
    pair = load_dataset_pair(out)
    if defense in ("at", "trades"):
        model = init_classifier(config.model)
        model, history = train_at(model, pair, config.train, _defense_for(config, defense_kind=defense))
        name = defense
    elif defense == "adml":
        base = Path(checkpoint) if checkpoint else out / "checkpoints" / "at.json"
        model_at = load_checkpoint(_require(base, "base checkpoint"))
        model, history = train_adml(model_at, pair, _defense_for(config, defense_kind="at"), config.train)
        name = "adml"
    else:
        raise ConfigError(f"unknown defense {defense!r}; choose at, trades or adml")
    _write_text(out / "history" / f"{name}.csv", _history_csv(history))
    path = out / "checkpoints" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(model, path)


def attack(config: ExperimentConfig, out, checkpoint, name: str) -> Path:
    """Attack the test split; writes flip statistics and the adversarial inputs."""
    out = Path(out)
    ckpt = Path(checkpoint)
    model = load_checkpoint(_require(ckpt, "checkpoint"))
    test = load_dataset_pair(out).test
    cfg = _attack(config, name)
    x, y = test.inputs, test.labels
    x_adv = run_attack(name, model, x, y, cfg)
    pred_clean = model.predict(x)
    pred_adv = model.predict(x_adv)
    flipped = (pred_clean == y) & (pred_adv != y)
    d = test.num_classes
    stats = {
        "checkpoint": ckpt.stem,
        "attack": name,
        "settings": dict(cfg.__dict__),
        "samples": int(len(y)),
        "clean_correct": int((pred_clean == y).sum()),
        "adversarial_correct": int((pred_adv == y).sum()),
        "flipped": int(flipped.sum()),
        "flipped_per_class": np.bincount(y[flipped], minlength=d).tolist(),
        "max_linf": float(np.max(np.abs(x_adv - x))) if len(y) else 0.0,
    }
    stem = f"{ckpt.stem}_{name}"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(x.shape[1])] + ["label", "pred_clean", "pred_adv"])
    for row, label, pc, pa in zip(x_adv, y, pred_clean, pred_adv):
        w.writerow([repr(float(v)) for v in row] + [int(label), int(pc), int(pa)])
    _write_text(out / "attacks" / f"{stem}.csv", buf.getvalue())
    return _write_text(out / "attacks" / f"{stem}.json", _dump_json(stats))


def theta_estimate(config: ExperimentConfig, model: Classifier, test, checkpoint_id: str) -> CausalEstimate:
    cfg = _attack(config, config.causal.attack)
    x, y = test.inputs, test.labels
    worst = select_worst(model, x, y, run_attack(config.causal.attack, model, x, y, cfg))
    prop_attack = cfg.replace(random_start=True, seed=config.causal.seed)
    p = np.ones(0)
    if len(worst):
        est = approx_propensity(model, worst.x, worst.y, prop_attack, config.causal.restarts)
        p = pool_observed_flip(est, worst.confidence)
    meta = {"checkpoint": checkpoint_id, "attack": config.causal.attack, "restarts": config.causal.restarts,
            "worst": int(len(worst)), "seed": config.causal.seed}
    return estimate_theta(worst, model, p, config.causal.norm, meta)


def estimate(config: ExperimentConfig, out, checkpoint) -> Path:
    out = Path(out)
    ckpt = Path(checkpoint)
    model = load_checkpoint(_require(ckpt, "checkpoint"))
    est = theta_estimate(config, model, load_dataset_pair(out).test, ckpt.stem)
    path = out / "theta" / f"{ckpt.stem}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    return est.save(path)


def report(config: ExperimentConfig, out, checkpoints, threads: int = 1) -> list[Path]:
    """One report per checkpoint; with two, the second carries rho relative to the first."""
    out = Path(out)
    paths = [Path(c) for c in checkpoints]
    if not 1 <= len(paths) <= 2:
        raise ConfigError("report takes one or two checkpoints")
    models = [load_checkpoint(_require(p, "checkpoint")) for p in paths]
    pair = load_dataset_pair(out)
    ds_id = dataset_id(out)
    attacks = dict(sorted(config.attacks.items()))
    reports = []
    for p, m in zip(paths, models):
        settings = {"seed": config.seed, "attacks": {k: dict(v.__dict__) for k, v in attacks.items()},
                    "provenance": m.provenance, "checksum": m.checksum()}
        reports.append(build_report(m, pair.test, attacks, p.stem, ds_id, threads,
                                    config.report.bottom_k, settings))
    if len(paths) == 2:
        base_acc = reports[0].attacks[config.causal.attack].per_class
        theta_base = theta_estimate(config, models[0], pair.test, paths[0].stem)
        theta_new = theta_estimate(config, models[1], pair.test, paths[1].stem)
        reports[1].relative_ratio = relative_ratio(theta_new, theta_base, base_acc, config.report.bottom_k)
        reports[1].settings["baseline"] = paths[0].stem

    written = []
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        for fmt in config.report.formats:
            written.append(emit_report(rep, rdir / f"{rep.model_id}.{fmt}", fmt))

    attack = config.report.plot_attack
    labels = [f"class {k}" for k in range(reports[0].num_classes)]
    series = {rep.model_id: rep.attacks[attack].per_class for rep in reports}
    written.append(emit_plot_svg(series, labels, rdir / f"per_class_{attack}.svg",
                                 title=f"per-class {attack} accuracy"))
    ks = [f"bottom_{k:g}" for k in config.report.bottom_k]
    bottom = {rep.model_id: [rep.bottom_k[attack][k] for k in ks] for rep in reports}
    written.append(emit_plot_svg(bottom, [k.replace("_", "-") + "%" for k in ks],
                                 rdir / f"bottom_k_{attack}.svg", title=f"bottom-k {attack} accuracy"))
    return written


def ablation_grid(config: ExperimentConfig, model_at: Classifier, pair: DatasetPair, threads: int = 1) -> list[dict]:
    """ADML fine-tuning over {split+crossfit on, off} x {worst, non_worst, all}."""
    if model_at.provenance not in ("at", "trades"):
        raise ContractError(f"ablate: base checkpoint has provenance {model_at.provenance!r}")
    name = config.report.plot_attack
    cfg = _attack(config, name)
    rows = []
    for sscf in (True, False):
        for ts in ("worst", "non_worst", "all"):
            d = _defense_for(config, defense_kind="at", use_split_crossfit=sscf, treatment_set=ts)
            model, _ = train_adml(model_at, pair, d, config.train)
            clean = robust_accuracy(model, pair.test, None, threads=threads)
            rob = robust_accuracy(model, pair.test, name, cfg, threads)
            rows.append({"use_split_crossfit": sscf, "treatment_set": ts, "clean": clean.overall,
                         "pgd_overall": rob.overall, "pgd_bottom_30": bottom_k_cumulative(rob.per_class, 30),
                         "pgd_per_class": rob.per_class})
    return rows


def ablate(config: ExperimentConfig, out, checkpoint=None, threads: int = 1) -> list[Path]:
    out = Path(out)
    base = Path(checkpoint) if checkpoint else out / "checkpoints" / "at.json"
    model_at = load_checkpoint(_require(base, "base checkpoint"))
    rows = ablation_grid(config, model_at, load_dataset_pair(out), threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow(["on" if r["use_split_crossfit"] else "off", r["treatment_set"]]
                   + [repr(float(r[k])) for k in ABLATION_COLUMNS[2:]])
    blob = {"base_checkpoint": base.stem, "attack": config.report.plot_attack, "rows": rows}
    return [_write_text(out / "ablation" / "ablation.csv", buf.getvalue()),
            _write_text(out / "ablation" / "ablation.json", _dump_json(blob))]


def run_all(config: ExperimentConfig, out, threads: int = 1) -> None:
    """gen-data, train at, train adml, attack, estimate-theta, report, ablate."""
    out = Path(out)
    gen_data(config, out)
    at_path = train(config, out, "at")
    adml_path = train(config, out, "adml", at_path)
    for ckpt in (at_path, adml_path):
        for name in sorted(config.attacks):
            attack(config, out, ckpt, name)
        estimate(config, out, ckpt)
    report(config, out, [at_path, adml_path], threads)
    ablate(config, out, at_path, threads)
