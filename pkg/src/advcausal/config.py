"""Experiment configuration: sectioned ``key = value`` files.

Example::

    [experiment]
    seed = 7

    [data]
    kind = gaussian_mixture
    num_classes = 4
    samples_per_class = 150, 450, 450, 450
    class_margin = 0.5, 1, 1, 1

    [attack.pgd]
    gamma = 0.05
    steps = 30

Every section is validated against its module's contracts when the file is
loaded, before any computation starts. Seeds not given explicitly are
derived from the global seed and the section name (see :func:`derive_seed`).
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ATTACKS, AttackConfig
from .causal import NORMS
from .datasets import SyntheticSpec
from .defenses import DefenseConfig
from .errors import AdvCausalError, ConfigError
from .models import ClassifierSpec, TrainConfig

SEED_MASK = (1 << 63) - 1

KNOWN_SECTIONS = {"experiment", "data", "model", "train", "defense", "causal", "report"}


def derive_seed(global_seed: int, name: str) -> int:
    """global seed XOR the first 8 bytes of sha256(name), kept non-negative."""
    digest = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")
    return (int(global_seed) ^ digest) & SEED_MASK


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]


@dataclass
class DataSection:
    synthetic: SyntheticSpec | None = None
    images_path: str | None = None
    labels_path: str | None = None
    csv_path: str | None = None
    label_column: int | str = -1
    test_ratio: float = 0.2
    seed: int = 0


@dataclass
class CausalSection:
    restarts: int = 8
    norm: str = "mean_abs"
    epsilon: float = 1e-4
    attack: str = "pgd"
    seed: int = 0


@dataclass
class ReportSection:
    out_dir: str = "runs"
    formats: tuple = ("json", "csv")
    bottom_k: tuple = (10, 30, 50)
    plot_attack: str = "pgd"


@dataclass
class ExperimentConfig:
    seed: int
    name: str
    data: DataSection
    model: ClassifierSpec
    train: TrainConfig
    attacks: dict = field(default_factory=dict)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    causal: CausalSection = field(default_factory=CausalSection)
    report: ReportSection = field(default_factory=ReportSection)
    source: str = ""

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return parse_config(self.source, seed_override=seed)


class _Section:
    """Typed accessor that remembers which keys were consumed."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.items = dict(parser[name]) if parser.has_section(name) else {}
        self.used: set[str] = set()

    def get(self, key, conv=str, default=None):
        if key not in self.items:
            return default
        self.used.add(key)
        raw = self.items[key]
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from None

    def check_unused(self):
        extra = set(self.items) - self.used
        if extra:
            raise ConfigError(f"[{self.name}] unknown keys: {', '.join(sorted(extra))}")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_config(text: str, seed_override: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in KNOWN_SECTIONS and not name.startswith("attack."):
            raise ConfigError(f"unknown section [{name}]")

    try:
        return _build(parser, text, seed_override)
    except ConfigError:
        raise
    except AdvCausalError as exc:
        raise ConfigError(str(exc)) from None


def _build(parser, text, seed_override) -> ExperimentConfig:
    exp = _Section(parser, "experiment")
    seed = exp.get("seed", int, 0)
    if seed_override is not None:
        seed = int(seed_override)
    name = exp.get("name", str, "experiment")
    exp.check_unused()

    # data
    sec = _Section(parser, "data")
    data = DataSection(seed=sec.get("seed", int, derive_seed(seed, "data")))
    data.test_ratio = sec.get("test_ratio", float, 0.2)
    data.images_path = sec.get("images_path")
    data.labels_path = sec.get("labels_path")
    data.csv_path = sec.get("csv_path")
    label_column = sec.get("label_column")
    if label_column is not None:
        data.label_column = int(label_column) if label_column.lstrip("-").isdigit() else label_column
    kind = sec.get("kind", str, "gaussian_mixture")
    num_classes = sec.get("num_classes", int, None)
    input_dim = sec.get("input_dim", int, 2)
    if data.images_path is None and data.csv_path is None:
        if num_classes is None:
            raise ConfigError("[data] num_classes is required for synthetic data")
        data.synthetic = SyntheticSpec(
            kind=kind,
            num_classes=num_classes,
            samples_per_class=sec.get("samples_per_class", _ints, [100] * num_classes),
            input_dim=input_dim,
            class_margin=sec.get("class_margin", _floats, [1.0] * num_classes),
            noise_scale=sec.get("noise_scale", float, 0.1),
            seed=data.seed,
            test_ratio=data.test_ratio,
        )
    elif data.images_path is not None and data.labels_path is None:
        raise ConfigError("[data] images_path needs labels_path")
    sec.check_unused()

    # model
    sec = _Section(parser, "model")
    d = data.synthetic.num_classes if data.synthetic else num_classes
    model = ClassifierSpec(
        input_dim=sec.get("input_dim", int, data.synthetic.input_dim if data.synthetic else input_dim),
        hidden_dims=tuple(sec.get("hidden_dims", _ints, [])),
        num_classes=sec.get("num_classes", int, d if d is not None else 2),
        activation=sec.get("activation", str, "relu"),
        init_seed=sec.get("init_seed", int, derive_seed(seed, "model")),
    )
    sec.check_unused()

    sec = _Section(parser, "train")
    train = TrainConfig(
        epochs=sec.get("epochs", int, 50),
        batch_size=sec.get("batch_size", int, 64),
        learning_rate=sec.get("learning_rate", float, 0.1),
        lr_schedule=sec.get("lr_schedule", str, "cyclic"),
        optimizer=sec.get("optimizer", str, "sgd"),
        momentum=sec.get("momentum", float, 0.9),
        seed=sec.get("seed", int, derive_seed(seed, "train")),
        early_stopping_patience=sec.get("early_stopping_patience", int, 0),
    )
    sec.check_unused()

    attacks = {}
    for name in parser.sections():
        if not name.startswith("attack."):
            continue
        label = name.split(".", 1)[1]
        sec = _Section(parser, name)
        if label not in ATTACKS:
            raise ConfigError(f"[{name}] unknown attack; choose from {', '.join(sorted(ATTACKS))}")
        method = label
        attacks[label] = AttackConfig(
            gamma=sec.get("gamma", float, 8 / 255),
            steps=sec.get("steps", int, 30),
            step_size=sec.get("step_size", float, None),
            random_start=sec.get("random_start", _bool, method == "pgd"),
            objective=sec.get("objective", str, "cw" if method == "cw" else "ce"),
            kappa=sec.get("kappa", float, 0.0),
            seed=sec.get("seed", int, derive_seed(seed, name)),
        )
        sec.check_unused()

    sec = _Section(parser, "defense")
    gamma = sec.get("gamma", float, 8 / 255)
    steps = sec.get("steps", int, 10)
    defense = DefenseConfig(
        defense_kind=sec.get("kind", str, "at"),
        attack=AttackConfig(gamma=gamma, steps=steps, step_size=sec.get("step_size", float, None),
                            random_start=sec.get("random_start", _bool, True),
                            seed=derive_seed(seed, "defense.attack")),
        trades_beta=sec.get("trades_beta", float, 6.0),
        adml_epochs=sec.get("adml_epochs", int, 10),
        adml_learning_rate=sec.get("adml_learning_rate", float, None),
        split_ratio=sec.get("split_ratio", float, 0.5),
        use_split_crossfit=sec.get("use_split_crossfit", _bool, True),
        treatment_set=sec.get("treatment_set", str, "worst"),
        propensity_source=sec.get("propensity_source", str, "confidence"),
        restarts=sec.get("restarts", int, 8),
        seed=sec.get("seed", int, derive_seed(seed, "defense")),
    )
    sec.check_unused()

    sec = _Section(parser, "causal")
    causal = CausalSection(
        restarts=sec.get("restarts", int, 8),
        norm=sec.get("norm", str, "mean_abs"),
        epsilon=sec.get("epsilon", float, 1e-4),
        attack=sec.get("attack", str, "pgd"),
        seed=sec.get("seed", int, derive_seed(seed, "causal")),
    )
    sec.check_unused()
    if causal.norm not in NORMS:
        raise ConfigError(f"[causal] norm must be one of {NORMS}")
    if causal.restarts < 1 or causal.epsilon <= 0:
        raise ConfigError("[causal] restarts must be >= 1 and epsilon > 0")
    if causal.attack not in attacks:
        raise ConfigError(f"[causal] attack {causal.attack!r} has no [attack.{causal.attack}] section")

    sec = _Section(parser, "report")
    report = ReportSection(
        out_dir=sec.get("out_dir", str, "runs"),
        formats=tuple(f.strip() for f in sec.get("formats", str, "json,csv").split(",") if f.strip()),
        bottom_k=tuple(sec.get("bottom_k", _floats, [10, 30, 50])),
        plot_attack=sec.get("plot_attack", str, "pgd"),
    )
    sec.check_unused()
    if set(report.formats) - {"json", "csv"}:
        raise ConfigError("[report] formats must be drawn from json, csv")
    if any(not 0 < k <= 100 for k in report.bottom_k):
        raise ConfigError("[report] bottom_k values must lie in (0, 100]")
    if report.plot_attack not in attacks:
        raise ConfigError(f"[report] plot_attack {report.plot_attack!r} has no attack section")

    return ExperimentConfig(seed, name, data, model, train, attacks, defense, causal, report, text)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, seed_override)
