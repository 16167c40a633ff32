"""l-inf first-order attacks (FGSM, BIM/PGD, CW-inf) and worst-example selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .models import Classifier, grad_wrt_input


@dataclass
class AttackConfig:
    """Hyperparameters of an l-inf attack.

    ``step_size`` defaults to 2.3 * gamma / steps.
    """

    gamma: float = 8 / 255
    steps: int = 30
    step_size: float | None = None
    random_start: bool = True
    objective: str = "ce"
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"AttackConfig: gamma must be >= 0, got {self.gamma}")
        if self.steps < 1:
            raise ContractError("AttackConfig: steps must be >= 1")
        if self.step_size is None:
            self.step_size = 2.3 * self.gamma / self.steps
        if self.step_size < 0 or (self.step_size == 0 and self.gamma > 0):
            raise ContractError("AttackConfig: step_size must be positive")
        if self.kappa < 0:
            raise ContractError("AttackConfig: kappa must be >= 0")
        if self.objective not in ("ce", "cw"):
            raise ContractError(f"AttackConfig: unknown objective {self.objective!r}")

    def replace(self, **changes) -> "AttackConfig":
        fields = dict(self.__dict__)
        if "gamma" in changes or "steps" in changes:
            fields["step_size"] = None
        fields.update(changes)
        return AttackConfig(**fields)


def project_linf(x_adv, x, gamma: float) -> np.ndarray:
    """Clip into the gamma-ball around ``x`` and then into [0, 1]."""
    if gamma < 0:
        raise ContractError(f"project_linf: gamma must be >= 0, got {gamma}")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise DimensionError(f"project_linf: shapes {x_adv.shape} and {x.shape} differ")
    return np.clip(np.clip(x_adv, x - gamma, x + gamma), 0.0, 1.0)


def _ascent_direction(model: Classifier, x, y, config: AttackConfig) -> np.ndarray:
    if config.objective == "cw":
        return grad_wrt_input(model, x, y, "cw", config.kappa)
    return grad_wrt_input(model, x, y, "ce")


def random_start_noise(shape: tuple, gamma: float, seed: int, offset: int = 0) -> np.ndarray:
    """Uniform(-gamma, gamma) noise with one derived stream per sample.

    Sample ``i`` of the batch draws from the stream seeded by (seed, offset + i),
    so sharded and serial evaluation agree.
    """
    rows = [np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, offset + i]).uniform(-gamma, gamma, shape[1:])
            for i in range(shape[0])]
    return np.stack(rows) if rows else np.zeros(shape)


def _prepare(model: Classifier, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"attack: inputs {x.shape} and labels {y.shape} are misaligned")
    return x, y


def fgsm(model: Classifier, x, y, config: AttackConfig) -> np.ndarray:
    x, y = _prepare(model, x, y)
    if config.gamma == 0:
        return x.copy()
    g = _ascent_direction(model, x, y, config)
    return project_linf(x + config.gamma * np.sign(g), x, config.gamma)


def pgd(model: Classifier, x, y, config: AttackConfig, sample_offset: int = 0) -> np.ndarray:
    """Projected sign-gradient ascent. BIM is ``random_start=False``."""
    x, y = _prepare(model, x, y)
    if config.gamma == 0:
        return x.copy()
    x_adv = x
    if config.random_start:
        x_adv = project_linf(x + random_start_noise(x.shape, config.gamma, config.seed, sample_offset),
                             x, config.gamma)
    for _ in range(config.steps):
        g = _ascent_direction(model, x_adv, y, config)
        x_adv = project_linf(x_adv + config.step_size * np.sign(g), x, config.gamma)
    return x_adv


def bim(model: Classifier, x, y, config: AttackConfig, sample_offset: int = 0) -> np.ndarray:
    return pgd(model, x, y, config.replace(random_start=False), sample_offset)


def cw_inf(model: Classifier, x, y, config: AttackConfig, sample_offset: int = 0) -> np.ndarray:
    if model.num_classes < 2:
        raise ContractError("cw_inf: needs at least two classes")
    if config.objective != "cw":
        config = config.replace(objective="cw")
    return pgd(model, x, y, config, sample_offset)


ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "cw": cw_inf}


def run_attack(name: str, model: Classifier, x, y, config: AttackConfig, sample_offset: int = 0) -> np.ndarray:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ContractError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    if fn is fgsm:
        return fgsm(model, x, y, config)
    return fn(model, x, y, config, sample_offset)


@dataclass
class WorstBatch:
    """Samples whose prediction an attack flipped, with their worst perturbations."""

    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    attacked_class: np.ndarray
    confidence: np.ndarray
    x_adv: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


def select_worst(model: Classifier, x, y, x_adv) -> WorstBatch:
    x, y = _prepare(model, x, y)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise DimensionError(f"select_worst: x_adv {x_adv.shape} vs x {x.shape}")
    probs = model.predict_proba(x_adv).data
    pred = np.argmax(probs, axis=1)
    idx = np.flatnonzero(pred != y)
    return WorstBatch(
        indices=idx,
        x=x[idx],
        y=y[idx],
        t=x_adv[idx] - x[idx],
        attacked_class=pred[idx],
        confidence=probs[idx, pred[idx]],
        x_adv=x_adv[idx],
    )
