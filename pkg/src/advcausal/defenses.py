"""Adversarial training: standard AT, a TRADES-style loss, and ADML fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .datasets import DatasetPair, LabeledDataset
from .errors import ContractError
from .models import (PROB_FLOOR, Classifier, TrainConfig, accuracy, cross_entropy, fit,
                     per_sample_cross_entropy)
from .tensor import Tensor

log = logging.getLogger(__name__)

TAU_MAX = 1e4
DEFENSE_KINDS = ("at", "trades", "adml_over_at", "adml_over_trades")
TREATMENT_SETS = ("worst", "non_worst", "all")


@dataclass
class DefenseConfig:
    defense_kind: str = "at"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(gamma=8 / 255, steps=10))
    trades_beta: float = 6.0
    adml_epochs: int = 10
    adml_learning_rate: float | None = None
    split_ratio: float = 0.5
    use_split_crossfit: bool = True
    treatment_set: str = "worst"
    propensity_source: str = "confidence"
    restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.defense_kind not in DEFENSE_KINDS:
            raise ContractError(f"DefenseConfig: unknown defense_kind {self.defense_kind!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ContractError("DefenseConfig: split_ratio must lie in (0, 1)")
        if self.treatment_set not in TREATMENT_SETS:
            raise ContractError(f"DefenseConfig: unknown treatment_set {self.treatment_set!r}")
        if self.propensity_source not in ("confidence", "restarts"):
            raise ContractError(f"DefenseConfig: unknown propensity_source {self.propensity_source!r}")
        if self.trades_beta < 0 or self.adml_epochs < 0 or self.restarts < 1:
            raise ContractError("DefenseConfig: invalid numeric setting")

    @property
    def base_kind(self) -> str:
        """The L_Defense plugged into ADML (or the defense itself)."""
        return self.defense_kind.removeprefix("adml_over_")


def _perturbed(x, t_prime) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) + np.asarray(t_prime, dtype=np.float64)


def at_loss(model: Classifier, x, y, t_prime) -> Tensor:
    """Mean CE on the attacked inputs."""
    return cross_entropy(model.predict_proba(_perturbed(x, t_prime)), y)


def trades_loss(model: Classifier, x, y, t_prime, beta: float = 6.0) -> Tensor:
    """CE(f(x), y) + beta * KL(f(x) || f(x + t'))."""
    if beta < 0:
        raise ContractError("trades_loss: beta must be >= 0")
    p_clean = model.predict_proba(np.asarray(x, dtype=np.float64))
    clean = cross_entropy(p_clean, y)
    if beta == 0:
        return clean
    p_adv = model.predict_proba(_perturbed(x, t_prime))
    log_clean = T.log(T.clamp(p_clean, lo=PROB_FLOOR))
    log_adv = T.log(T.clamp(p_adv, lo=PROB_FLOOR))
    kl = T.mean(T.sum_(T.mul(p_clean, T.sub(log_clean, log_adv)), axis=1))
    return T.add(clean, T.mul(kl, float(beta)))


def defense_loss(kind: str, model: Classifier, x, y, t_prime, beta: float = 6.0) -> Tensor:
    if kind == "at":
        return at_loss(model, x, y, t_prime)
    if kind == "trades":
        return trades_loss(model, x, y, t_prime, beta)
    raise ContractError(f"defense_loss: unknown kind {kind!r}")


def balancing_ratio(confidence) -> np.ndarray:
    """tau = 1 / confidence - 1, with confidence floored and tau capped at TAU_MAX."""
    c = np.maximum(np.asarray(confidence, dtype=np.float64), PROB_FLOOR)
    return np.minimum(1.0 / c - 1.0, TAU_MAX)


def split_and_crossfit(n: int, split_ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fresh random partition of ``range(n)`` into (D1, D2) with |D1| = round(ratio * n).

    Called once per batch, so every sample alternates between the two roles
    over the course of training.
    """
    if n < 2:
        raise ContractError(f"split_and_crossfit: batch of {n} cannot be split")
    if not 0.0 < split_ratio < 1.0:
        raise ContractError("split_and_crossfit: split_ratio must lie in (0, 1)")
    k = min(max(int(round(split_ratio * n)), 1), n - 1)
    perm = rng.permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


@dataclass
class ADMLTerms:
    loss: Tensor
    loss_a: Tensor
    loss_b: Tensor
    selected: np.ndarray
    tau: np.ndarray


def adml_terms(model: Classifier, d1, d2, t1_prime, t2_prime, defense_kind: str = "at",
               treatment_set: str = "worst", trades_beta: float = 6.0, confidence=None) -> ADMLTerms:
    """Both halves of the ADML objective on one split batch.

    ``d1``/``d2`` are ``(x, y)`` pairs. ``confidence`` optionally overrides the
    per-sample propensity used for tau (aligned with ``d2``); by default it is
    the attacked top-class probability f_{j*}(x + t). tau is a constant weight.
    """
    kind = defense_kind.removeprefix("adml_over_")
    if treatment_set not in TREATMENT_SETS:
        raise ContractError(f"adml_loss: unknown treatment_set {treatment_set!r}")
    x1, y1 = d1
    x2, y2 = np.asarray(d2[0], dtype=np.float64), np.asarray(d2[1], dtype=np.int64)
    loss_a = defense_loss(kind, model, x1, y1, t1_prime, trades_beta)

    x2_adv = _perturbed(x2, t2_prime)
    probs = model.predict_proba(x2_adv, frozen=True).data if len(y2) else np.zeros((0, model.num_classes))
    top = np.argmax(probs, axis=1)
    flipped = top != y2
    if treatment_set == "worst":
        sel = np.flatnonzero(flipped)
    elif treatment_set == "non_worst":
        sel = np.flatnonzero(~flipped)
    else:
        sel = np.arange(len(y2))

    if sel.size == 0:
        zero = Tensor._wrap(np.array(0.0))
        return ADMLTerms(T.add(loss_a, zero), loss_a, zero, sel, np.zeros(0))

    conf = probs[sel, top[sel]] if confidence is None else np.asarray(confidence, dtype=np.float64)[sel]
    tau = balancing_ratio(conf)
    ce_adv = per_sample_cross_entropy(model.predict_proba(x2_adv[sel]), y2[sel])
    ce_clean = per_sample_cross_entropy(model.predict_proba(x2[sel]), y2[sel])
    loss_b = T.add(T.mean(T.mul(ce_adv, Tensor._wrap(tau))), T.mean(ce_clean))
    return ADMLTerms(T.add(loss_a, loss_b), loss_a, loss_b, sel, tau)


def adml_loss(model: Classifier, d1, d2, t1_prime, t2_prime, defense_kind: str = "at",
              treatment_set: str = "worst", trades_beta: float = 6.0, confidence=None) -> Tensor:
    """L_a + L_b; L_b is exactly zero when no sample of ``d2`` is selected."""
    return adml_terms(model, d1, d2, t1_prime, t2_prime, defense_kind, treatment_set,
                      trades_beta, confidence).loss


# ---------------------------------------------------------------- training loops

def batch_attack_config(attack: AttackConfig, step: int) -> AttackConfig:
    seed = int(np.random.SeedSequence([attack.seed & 0xFFFFFFFFFFFFFFFF, step]).generate_state(1, np.uint64)[0])
    return attack.replace(seed=seed)


def _split_pair(data) -> tuple[LabeledDataset, LabeledDataset]:
    if isinstance(data, DatasetPair):
        return data.train, data.test
    return data, data


def _history_hook(history: list, model_eval: LabeledDataset, attack: AttackConfig, patience: int,
                  restore: list):
    eval_attack = attack.replace(seed=attack.seed ^ 0x5EED)
    best = {"acc": -1.0, "epoch": -1}

    def on_epoch(epoch, model, loss, lr):
        x, y = model_eval.inputs, model_eval.labels
        clean = accuracy(model, x, y)
        robust = accuracy(model, pgd(model, x, y, eval_attack), y)
        history.append({"epoch": epoch + 1, "clean_acc": clean, "pgd_acc": robust, "loss": loss, "lr": lr})
        log.debug("epoch %d loss %.4f clean %.3f pgd %.3f", epoch + 1, loss, clean, robust)
        if patience <= 0:
            return False
        if robust > best["acc"]:
            best.update(acc=robust, epoch=epoch)
            restore[:] = [p.data for p in model.params]
            return False
        return epoch - best["epoch"] >= patience

    return on_epoch


def train_at(model: Classifier, dataset, train: TrainConfig, defense: DefenseConfig | None = None):
    """Standard (or TRADES-style) adversarial training with a PGD inner attack.

    Returns ``(model, history)``; ``history`` has one dict per epoch.
    """
    defense = defense or DefenseConfig()
    kind = defense.base_kind
    train_set, eval_set = _split_pair(dataset)
    history: list[dict] = []
    best_params: list = []

    def batch_loss(m, xb, yb, step):
        x_adv = pgd(m, xb, yb, batch_attack_config(defense.attack, step))
        return defense_loss(kind, m, xb, yb, x_adv - xb, defense.trades_beta)

    hook = _history_hook(history, eval_set, defense.attack, train.early_stopping_patience, best_params)
    fit(model, train_set.inputs, train_set.labels, train, batch_loss, hook)
    if best_params:
        for p, data in zip(model.params, best_params):
            p.assign(data)
    if train.epochs > 0:
        model.provenance = kind
    return model, history


def train_adml(model_at: Classifier | None, dataset, defense: DefenseConfig, train: TrainConfig):
    """Fine-tune an adversarially trained checkpoint with the ADML objective.

    Per batch: PGD attack, split into (D1, D2) unless the split is ablated,
    L_Defense on D1, tau-weighted worst examples of D2, one SGD step.
    """
    if model_at is None:
        raise ContractError("train_adml: an adversarially trained checkpoint is required")
    if model_at.provenance not in ("at", "trades"):
        raise ContractError(
            f"train_adml: expected an AT/TRADES checkpoint, got provenance {model_at.provenance!r}")
    from .causal import approx_propensity, pool_observed_flip  # causal imports this module

    model = model_at.copy()
    lr = defense.adml_learning_rate if defense.adml_learning_rate is not None else train.learning_rate / 500
    cfg = TrainConfig(epochs=defense.adml_epochs, batch_size=train.batch_size, learning_rate=lr,
                      lr_schedule=train.lr_schedule, momentum=train.momentum, seed=defense.seed)
    kind = "adml_over_" + model_at.provenance if defense.defense_kind in ("at", "trades") else defense.defense_kind
    split_rng = np.random.default_rng([defense.seed & 0xFFFFFFFFFFFFFFFF, 0x5B117])
    train_set, eval_set = _split_pair(dataset)
    history: list[dict] = []

    def batch_loss(m, xb, yb, step):
        attack = batch_attack_config(defense.attack, step)
        t_prime = pgd(m, xb, yb, attack) - xb
        if defense.use_split_crossfit and len(yb) >= 2:
            i1, i2 = split_and_crossfit(len(yb), defense.split_ratio, split_rng)
        else:
            i1 = i2 = np.arange(len(yb))
        confidence = None
        if defense.propensity_source == "restarts":
            prop = approx_propensity(m, xb[i2], yb[i2], attack.replace(random_start=True), defense.restarts)
            probs = m.predict_proba(xb[i2] + t_prime[i2]).data
            top = np.argmax(probs, axis=1)
            # a flip by t' is one more observation of the attacked-class confidence
            flipped = top != yb[i2]
            pooled = pool_observed_flip(prop, probs[np.arange(len(top)), top])
            confidence = np.where(flipped, pooled, prop.p)
        return adml_loss(m, (xb[i1], yb[i1]), (xb[i2], yb[i2]), t_prime[i1], t_prime[i2],
                         kind, defense.treatment_set, defense.trades_beta, confidence)

    hook = _history_hook(history, eval_set, defense.attack, 0, [])
    fit(model, train_set.inputs, train_set.labels, cfg, batch_loss, hook)
    model.provenance = kind
    return model, history
