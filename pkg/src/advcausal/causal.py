"""Causal parameter of adversarial perturbations.

The treatment is a worst perturbation ``t`` (one that flips the prediction),
the outcome is the one-hot label and the covariate is the clean input. The
classifier plays the outcome nuisance ``f(x, t) = f(x + t)`` and the attack
plays the treatment generator. Residual terms of the structural equations
and the Taylor-coefficient form of the parameter are never materialised;
everything goes through the orthogonalised interventional expectation and
the propensity-weighted input Jacobian below.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, WorstBatch, pgd
from .errors import ContractError, DegenerateDenominatorError, DimensionError
from .models import PROB_FLOOR, Classifier, grad_wrt_input, one_hot

NORMS = ("mean_abs", "l2")
ESTIMATE_VERSION = 1


@dataclass
class PropensityEstimate:
    p: np.ndarray
    restarts: int
    confidences: np.ndarray
    flipped: np.ndarray

    @property
    def is_worst(self) -> np.ndarray:
        return self.flipped.any(axis=1)


def restart_seed(seed: int, restart: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xC0FFEE, restart]).generate_state(1, np.uint64)[0])


def approx_propensity(model: Classifier, x, y, attack: AttackConfig, m: int = 8) -> PropensityEstimate:
    """Sharpened propensity: mean attacked top-class confidence over flipping restarts.

    Samples no restart flips get p = PROB_FLOOR and ``is_worst`` False.
    """
    if m < 1:
        raise ContractError("approx_propensity: need at least one restart")
    if not attack.random_start:
        raise ContractError("approx_propensity: attack must use random starts")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    conf = np.full((x.shape[0], m), np.nan)
    flipped = np.zeros((x.shape[0], m), dtype=bool)
    for r in range(m):
        x_adv = pgd(model, x, y, attack.replace(seed=restart_seed(attack.seed, r)))
        probs = model.predict_proba(x_adv).data
        top = np.argmax(probs, axis=1)
        flipped[:, r] = top != y
        conf[:, r] = np.where(flipped[:, r], probs[np.arange(len(y)), top], np.nan)
    counts = flipped.sum(axis=1)
    sums = np.where(flipped, conf, 0.0).sum(axis=1)
    p = np.where(counts > 0, sums / np.maximum(counts, 1), PROB_FLOOR)
    return PropensityEstimate(np.maximum(p, PROB_FLOOR), m, conf, flipped)


def pool_observed_flip(estimate: PropensityEstimate, confidence) -> np.ndarray:
    """Propensity that also counts the flip which selected each worst sample.

    A sample chosen as worst has been flipped at least once, so its
    propensity should never fall back to the floor just because the
    restarts missed; the selecting attack's confidence joins the average.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.shape != estimate.p.shape:
        raise ContractError("pool_observed_flip: one confidence per sample required")
    counts = estimate.flipped.sum(axis=1) + 1
    sums = np.where(estimate.flipped, estimate.confidences, 0.0).sum(axis=1) + confidence
    return np.maximum(sums / counts, PROB_FLOOR)


def _propensity_array(propensity, n: int) -> np.ndarray:
    p = propensity.p if isinstance(propensity, PropensityEstimate) else propensity
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != n:
        raise ContractError(f"propensity has {p.shape[0]} entries for {n} samples")
    if np.any(p <= 0) or np.any(p > 1):
        raise ContractError("propensity values must lie in (0, 1]")
    return p


def interventional_expectation(model: Classifier, x, y, t, propensity, treated=None) -> np.ndarray:
    """Orthogonalised estimate of E[y | do(T = t)] as a d-vector.

    Averages ``f(x+t) + treated * (y - f(x+t)) / p`` over the samples. With
    ``treated`` omitted every sample belongs to the treated sub-population.
    Passing a mask lets untreated samples contribute the plug-in term only,
    which is the form whose first-order sensitivity to ``f`` vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("interventional_expectation: empty sample set")
    y = np.asarray(y, dtype=np.int64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != x.shape or y.shape[0] != x.shape[0]:
        raise DimensionError(f"interventional_expectation: x {x.shape}, t {t.shape}, y {y.shape}")
    p = _propensity_array(propensity, x.shape[0])
    w = np.ones(x.shape[0]) if treated is None else np.asarray(treated, dtype=np.float64)
    f = model.predict_proba(x + t).data
    resid = one_hot(y, model.num_classes) - f
    return np.mean(f + (w / p)[:, None] * resid, axis=0)


@dataclass
class CausalEstimate:
    """|theta| per class from propensity-weighted input Jacobians.

    ``per_sample`` holds the reduced magnitude of each sample's weighted
    Jacobian; ``terms`` keeps the full (n, d, input_dim) tensors in memory
    only (they are not serialised).
    """

    per_class: np.ndarray
    class_counts: np.ndarray
    overall: float
    per_sample: np.ndarray
    labels: np.ndarray
    norm: str = "mean_abs"
    metadata: dict = field(default_factory=dict)
    terms: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "format": "advcausal-causal-estimate",
            "version": ESTIMATE_VERSION,
            "norm": self.norm,
            "per_class": self.per_class.tolist(),
            "class_counts": self.class_counts.tolist(),
            "overall": self.overall,
            "per_sample": self.per_sample.tolist(),
            "labels": self.labels.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "CausalEstimate":
        return cls(np.array(blob["per_class"], dtype=np.float64), np.array(blob["class_counts"], dtype=np.int64),
                   float(blob["overall"]), np.array(blob["per_sample"], dtype=np.float64),
                   np.array(blob["labels"], dtype=np.int64), blob["norm"], blob.get("metadata", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CausalEstimate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _reduce(terms: np.ndarray, norm: str) -> np.ndarray:
    flat = terms.reshape(terms.shape[0], -1)
    if norm == "mean_abs":
        return np.abs(flat).mean(axis=1)
    if norm == "l2":
        return np.sqrt((flat ** 2).sum(axis=1))
    raise ContractError(f"unknown norm {norm!r}; choose from {NORMS}")


def estimate_theta(worst: WorstBatch, model: Classifier, propensity, norm: str = "mean_abs",
                   metadata: dict | None = None) -> CausalEstimate:
    """Per-sample -(1/p - 1) * d f(x+t) / d t, reduced to magnitudes and grouped by true class.

    Classes without worst samples report 0 with a zero count.
    """
    if norm not in NORMS:
        raise ContractError(f"estimate_theta: unknown norm {norm!r}")
    n = len(worst)
    p = _propensity_array(propensity, n)
    d = model.num_classes
    if n == 0:
        terms = np.zeros((0, d, model.spec.input_dim))
    else:
        jac = grad_wrt_input(model, worst.x_adv, loss_kind="prob")
        terms = -(1.0 / p - 1.0)[:, None, None] * jac
    mags = _reduce(terms, norm) if n else np.zeros(0)
    counts = np.bincount(worst.y, minlength=d) if n else np.zeros(d, dtype=np.int64)
    sums = np.bincount(worst.y, weights=mags, minlength=d) if n else np.zeros(d)
    per_class = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    overall = float(np.dot(per_class, counts) / counts.sum()) if counts.sum() else 0.0
    return CausalEstimate(per_class, counts.astype(np.int64), overall, mags, np.asarray(worst.y),
                          norm, dict(metadata or {}), terms)


def _unit_directions(t: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    return np.where(norms > 0, t / np.where(norms > 0, norms, 1.0), 0.0)


def finite_diff_theta(model: Classifier, x, y, t, epsilon: float, propensity, treated=None) -> np.ndarray:
    """Difference quotient of the interventional expectation along each sample's t/||t||.

    Returns (E[y | do(eps * u)] - E[y | do(0)]) / eps as a d-vector.
    """
    if not epsilon > 0:
        raise ContractError("finite_diff_theta: epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    u = _unit_directions(np.asarray(t, dtype=np.float64))
    zero = np.zeros_like(x)
    hi = interventional_expectation(model, x, y, epsilon * u, propensity, treated)
    lo = interventional_expectation(model, x, y, zero, propensity, treated)
    return (hi - lo) / epsilon


def plugin_directional_derivative(model: Classifier, x, t, propensity, treated=None) -> np.ndarray:
    """Analytic d/d eps of the interventional expectation at eps = 0 along t/||t||."""
    x = np.asarray(x, dtype=np.float64)
    p = _propensity_array(propensity, x.shape[0])
    w = np.ones(x.shape[0]) if treated is None else np.asarray(treated, dtype=np.float64)
    u = _unit_directions(np.asarray(t, dtype=np.float64))
    jac = grad_wrt_input(model, x, loss_kind="prob")
    return np.mean((1.0 - w / p)[:, None] * np.einsum("ndk,nk->nd", jac, u), axis=0)


def bottom_k_classes(per_class_acc, k_percent: float) -> np.ndarray:
    """Indices of the ceil(k% * d) lowest-accuracy classes, ties by class index."""
    acc = np.asarray(per_class_acc, dtype=np.float64)
    if not 0 < k_percent <= 100:
        raise ContractError("k_percent must lie in (0, 100]")
    count = math.ceil(k_percent / 100.0 * acc.size - 1e-12)
    return np.lexsort((np.arange(acc.size), acc))[:max(count, 1)]


def relative_ratio(theta_adml: CausalEstimate, theta_at: CausalEstimate, per_class_acc_at,
                   ks=(10, 30, 50)) -> dict:
    """rho_k = 100 * |theta_ADML| / |theta_AT| over the AT model's bottom-k classes, plus "avg"."""
    if theta_adml.norm != theta_at.norm:
        raise ContractError(f"relative_ratio: norms differ ({theta_adml.norm} vs {theta_at.norm})")
    if theta_adml.per_class.shape != theta_at.per_class.shape:
        raise ContractError("relative_ratio: estimates cover different class counts")
    out = {}
    for k in ks:
        idx = bottom_k_classes(per_class_acc_at, k)
        den = float(np.mean(theta_at.per_class[idx]))
        if den == 0:
            raise DegenerateDenominatorError(f"relative_ratio: |theta_AT| is zero on bottom-{k}% classes")
        out[f"bottom_{k:g}"] = 100.0 * float(np.mean(theta_adml.per_class[idx])) / den
    if theta_at.overall == 0:
        raise DegenerateDenominatorError("relative_ratio: overall |theta_AT| is zero")
    out["avg"] = 100.0 * theta_adml.overall / theta_at.overall
    return out
