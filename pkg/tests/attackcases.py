"""Randomised attack invocations and the PGD grid-search fixtures."""

from __future__ import annotations

import numpy as np

from advcausal.attacks import ATTACKS, AttackConfig, run_attack
from advcausal.models import ClassifierSpec, init_classifier

from conftest import linear_model
from oracles import ce, grid_max_ce, linear_probs

NAMES = sorted(ATTACKS)


def fuzz_case(i: int):
    """Deterministic random (model, inputs, config, attack name) for invocation ``i``."""
    rng = np.random.default_rng([2024, i])
    input_dim = int(rng.integers(1, 5))
    d = int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
    model = init_classifier(ClassifierSpec(input_dim, hidden, d, init_seed=int(rng.integers(2**32))))
    n = int(rng.integers(1, 5))
    # inputs include exact 0/1 corners so the range clip is exercised
    x = rng.choice([0.0, 1.0, np.nan], size=(n, input_dim), p=[0.15, 0.15, 0.7])
    x = np.where(np.isnan(x), rng.uniform(size=(n, input_dim)), x)
    y = rng.integers(0, d, size=n)
    gamma = float(rng.choice([0.0, 1e-3, 0.03, 0.1, 0.3, 0.8]))
    steps = int(rng.integers(1, 6))
    step_size = None if rng.uniform() < 0.5 else float(rng.uniform(0.01, 0.5)) if gamma > 0 else None
    cfg = AttackConfig(gamma=gamma, steps=steps, step_size=step_size, random_start=bool(rng.integers(2)),
                       kappa=float(rng.choice([0.0, 0.5])), seed=int(rng.integers(2**63)))
    return model, x, y, cfg, NAMES[i % len(NAMES)]


def fuzz_violations(i: int) -> tuple[int, bool]:
    """(constraint violations, deterministic rerun?) for invocation ``i``."""
    model, x, y, cfg, name = fuzz_case(i)
    before = model.checksum()
    a = run_attack(name, model, x, y, cfg)
    b = run_attack(name, model, x, y, cfg)
    bad = int(np.sum(np.abs(a - x) > cfg.gamma + 1e-9)) + int(np.sum((a < 0) | (a > 1)))
    return bad, a.tobytes() == b.tobytes() and model.checksum() == before


def logistic_fixture(seed: int):
    rng = np.random.default_rng([seed, 31])
    W = rng.normal(scale=3.0, size=(2, 2))
    b = rng.normal(size=2)
    x = rng.uniform(0.05, 0.95, size=(1, 2))
    y = int(rng.integers(0, 2))
    return W, b, x, y


def pgd_vs_grid(seed: int) -> tuple[float, float]:
    """(PGD loss, grid-search maximum) on one 2-input logistic fixture, gamma 0.1, 20 steps."""
    W, b, x, y = logistic_fixture(seed)
    model = linear_model(W, b)
    cfg = AttackConfig(gamma=0.1, steps=20, random_start=True, seed=seed)
    x_adv = run_attack("pgd", model, x, np.array([y]), cfg)
    achieved = float(ce(linear_probs(W, b, x_adv), [y])[0])
    return achieved, grid_max_ce(W, b, x[0], y, 0.1, 0.005)
