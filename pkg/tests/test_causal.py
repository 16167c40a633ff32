import numpy as np
import pytest

from advcausal.attacks import AttackConfig, WorstBatch, pgd, select_worst
from advcausal.causal import (CausalEstimate, approx_propensity, bottom_k_classes, estimate_theta,
                              finite_diff_theta, interventional_expectation, plugin_directional_derivative, pool_observed_flip,
                              relative_ratio)
from advcausal.errors import ContractError, DegenerateDenominatorError, DimensionError
from advcausal.models import PROB_FLOOR

from conftest import linear_model
import oracles

P3 = np.array([0.5, 0.25, 1.0])


def three_sample():
    rng = np.random.default_rng(31)
    x = rng.uniform(0.2, 0.8, size=(3, 2))
    t = rng.uniform(-0.05, 0.05, size=(3, 2))
    return x, np.array([0, 1, 2]), t


def test_three_sample_uniform_model_hand_value():
    x, y, t = three_sample()
    model = linear_model(np.zeros((3, 2)), np.zeros(3))
    # f = 1/3 everywhere: mean of [5/3,-1/3,-1/3], [-1,3,-1], [0,0,1]
    expected = np.array([2 / 9, 8 / 9, -1 / 9])
    got = interventional_expectation(model, x, y, t, P3)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_three_sample_matches_oracle():
    x, y, t = three_sample()
    W = np.array([[1.5, -0.5], [-1.0, 2.0], [0.3, 0.1]])
    b = np.array([0.1, -0.2, 0.0])
    got = interventional_expectation(linear_model(W, b), x, y, t, P3)
    ref = oracles.interventional_expectation(oracles.linear_probs(W, b, x + t), y, P3, 3)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_perfect_model_returns_empirical_distribution():
    x = np.eye(3)[[0, 1, 1, 2, 1]]
    y = np.array([0, 1, 1, 2, 1])
    # exp(-1000) underflows so the softmax is exactly one-hot
    model = linear_model(1000.0 * np.eye(3), np.zeros(3))
    got = interventional_expectation(model, x, y, np.zeros_like(x), [0.3, 0.5, 0.9, 0.2, 1.0])
    np.testing.assert_array_equal(got, np.bincount(y, minlength=3) / 5)


def test_unit_propensity_gives_label_mean():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(6, 2)), rng.integers(0, 3, 6)
    model = linear_model(rng.normal(size=(3, 2)), rng.normal(size=3))
    got = interventional_expectation(model, x, y, np.zeros_like(x), np.ones(6))
    np.testing.assert_allclose(got, np.bincount(y, minlength=3) / 6, atol=1e-15)


def test_treated_mask_matches_oracle():
    rng = np.random.default_rng(4)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    x, y, t = rng.uniform(size=(10, 2)), rng.integers(0, 3, 10), rng.uniform(-0.05, 0.05, (10, 2))
    p = rng.uniform(0.3, 1.0, 10)
    mask = rng.integers(0, 2, 10)
    got = interventional_expectation(linear_model(W, b), x, y, t, p, treated=mask)
    ref = oracles.interventional_expectation(oracles.linear_probs(W, b, x + t), y, p, 3, treated=mask)
    assert np.max(np.abs(got - ref)) < 1e-12


def _orthogonality_gap(rng, n, exact):
    # true outcome model and a perturbed one; treatment drawn with known p
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    x = rng.uniform(size=(n, 2))
    probs = oracles.linear_probs(W, b, x)
    y = np.array([rng.choice(3, p=row) for row in probs])
    p = np.full(n, 0.4)
    if exact:
        treated = np.zeros(n)
        treated[rng.permutation(n)[: int(0.4 * n)]] = 1
    else:
        treated = rng.uniform(size=n) < p
    zero = np.zeros_like(x)
    truth = interventional_expectation(linear_model(W, b), x, y, zero, p, treated)
    outs = []
    for delta in (1e-3, 2e-3):
        shift = linear_model(W + delta, b + delta)
        outs.append(interventional_expectation(shift, x, y, zero, p, treated) - truth)
    return outs


def test_first_order_sensitivity_is_small_relative_to_perturbation():
    rng = np.random.default_rng(9)
    small, large = _orthogonality_gap(rng, 4000, exact=True)
    # with exact treated fraction p the f-coefficient averages to zero, so the
    # residual response is dominated by sampling noise rather than the shift
    assert np.max(np.abs(small)) < 5e-4 and np.max(np.abs(large)) < 1e-3


def test_interventional_expectation_errors():
    model = linear_model(np.zeros((2, 2)), np.zeros(2))
    x = np.zeros((2, 2))
    with pytest.raises(ContractError):
        interventional_expectation(model, x, [0, 1], x, [0.0, 0.5])
    with pytest.raises(ContractError):
        interventional_expectation(model, x, [0, 1], x, [0.5])
    with pytest.raises(DimensionError):
        interventional_expectation(model, x, [0, 1], np.zeros((2, 3)), [0.5, 0.5])
    with pytest.raises(ContractError):
        interventional_expectation(model, np.zeros((0, 2)), [], np.zeros((0, 2)), [])


def constant_model():
    # every input scores [0.1, 0.9]
    return linear_model(np.zeros((2, 2)), [0.0, np.log(9.0)])


def test_propensity_constant_confidence():
    x = np.random.default_rng(0).uniform(size=(5, 2))
    est = approx_propensity(constant_model(), x, np.zeros(5, dtype=int),
                            AttackConfig(gamma=0.05, steps=3, random_start=True, seed=3), m=16)
    np.testing.assert_allclose(est.p, 0.9, rtol=0, atol=1e-15)
    assert est.flipped.all() and est.is_worst.all() and est.restarts == 16


def test_propensity_without_flips_is_floor():
    x = np.random.default_rng(0).uniform(size=(4, 2))
    est = approx_propensity(constant_model(), x, np.ones(4, dtype=int),
                            AttackConfig(gamma=0.05, steps=3, random_start=True, seed=3), m=4)
    np.testing.assert_array_equal(est.p, PROB_FLOOR)
    assert not est.is_worst.any()


def test_propensity_errors():
    x = np.zeros((2, 2))
    with pytest.raises(ContractError):
        approx_propensity(constant_model(), x, [0, 0], AttackConfig(random_start=True), m=0)
    with pytest.raises(ContractError):
        approx_propensity(constant_model(), x, [0, 0], AttackConfig(random_start=False), m=2)


def test_propensity_is_deterministic():
    rng = np.random.default_rng(5)
    model = linear_model(rng.normal(size=(3, 2)) * 4, rng.normal(size=3))
    x, y = rng.uniform(size=(20, 2)), rng.integers(0, 3, 20)
    cfg = AttackConfig(gamma=0.2, steps=5, random_start=True, seed=8)
    a, b = approx_propensity(model, x, y, cfg, 5), approx_propensity(model, x, y, cfg, 5)
    np.testing.assert_array_equal(a.p, b.p)
    assert np.all((a.p > 0) & (a.p <= 1))


def make_worst(rng, n=8, d=3, k=2):
    W, b = rng.normal(size=(d, k)) * 2, rng.normal(size=d)
    x = rng.uniform(size=(n, k))
    t = rng.uniform(-0.05, 0.05, (n, k))
    y = rng.integers(0, d, n)
    batch = WorstBatch(np.arange(n), x, y, t, np.zeros(n, dtype=int), np.full(n, 0.5), x + t)
    return W, b, batch


@pytest.mark.parametrize("seed", range(5))
def test_theta_terms_match_closed_form_jacobian(seed):
    rng = np.random.default_rng(seed)
    W, b, batch = make_worst(rng)
    p = rng.uniform(0.2, 1.0, len(batch))
    p[0] = 1.0
    est = estimate_theta(batch, linear_model(W, b), p)
    ref = -(1.0 / p - 1.0)[:, None, None] * oracles.softmax_linear_jacobian(W, b, batch.x_adv)
    assert np.max(np.abs(est.terms - ref)) < 1e-10
    assert np.all(est.terms[0] == 0) and est.per_sample[0] == 0
    np.testing.assert_allclose(est.per_sample, np.abs(ref).reshape(len(p), -1).mean(axis=1), atol=1e-12)


def test_theta_l2_norm_and_class_grouping():
    rng = np.random.default_rng(3)
    W, b, batch = make_worst(rng, n=10, d=4)
    batch.y[:] = [0, 0, 1, 1, 1, 3, 3, 3, 3, 0]
    p = rng.uniform(0.2, 0.9, 10)
    est = estimate_theta(batch, linear_model(W, b), p, norm="l2")
    ref = -(1.0 / p - 1.0)[:, None, None] * oracles.softmax_linear_jacobian(W, b, batch.x_adv)
    mags = np.sqrt((ref.reshape(10, -1) ** 2).sum(axis=1))
    np.testing.assert_allclose(est.per_sample, mags, atol=1e-12)
    assert est.class_counts.tolist() == [3, 3, 0, 4]
    assert est.per_class[2] == 0
    np.testing.assert_allclose(est.per_class[3], mags[5:9].mean(), atol=1e-12)
    np.testing.assert_allclose(est.overall, mags.mean(), atol=1e-12)


def test_theta_scales_with_propensity_weight():
    rng = np.random.default_rng(6)
    W, b, batch = make_worst(rng)
    model = linear_model(W, b)
    # 1/p - 1 goes from 1 to 3
    low = estimate_theta(batch, model, np.full(len(batch), 0.5))
    high = estimate_theta(batch, model, np.full(len(batch), 0.25))
    np.testing.assert_allclose(high.per_sample, 3 * low.per_sample, rtol=1e-12)


def test_theta_empty_batch_and_bad_norm():
    model = linear_model(np.eye(2), np.zeros(2))
    empty = WorstBatch(np.zeros(0, int), np.zeros((0, 2)), np.zeros(0, int), np.zeros((0, 2)),
                       np.zeros(0, int), np.zeros(0), np.zeros((0, 2)))
    est = estimate_theta(empty, model, np.zeros(0) + 0.5)
    assert est.overall == 0 and est.per_class.tolist() == [0, 0]
    with pytest.raises(ContractError):
        estimate_theta(empty, model, [], norm="l1")


def test_theta_on_attacked_batch_is_finite():
    rng = np.random.default_rng(7)
    model = linear_model(rng.normal(size=(3, 2)) * 3, rng.normal(size=3))
    x, y = rng.uniform(size=(40, 2)), rng.integers(0, 3, 40)
    cfg = AttackConfig(gamma=0.1, steps=5, random_start=True, seed=1)
    worst = select_worst(model, x, y, pgd(model, x, y, cfg))
    prop = approx_propensity(model, worst.x, worst.y, cfg, 3)
    est = estimate_theta(worst, model, prop)
    assert np.all(np.isfinite(est.per_sample)) and len(worst) > 0


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference_matches_analytic_derivative(seed):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    model = linear_model(W, b)
    x, y = rng.uniform(size=(12, 2)), rng.integers(0, 3, 12)
    t = rng.uniform(-0.05, 0.05, (12, 2))
    p = rng.uniform(0.2, 0.9, 12)
    fd = finite_diff_theta(model, x, y, t, 1e-4, p)
    exact = plugin_directional_derivative(model, x, t, p)
    assert np.max(np.abs(fd - exact) / np.maximum(np.abs(exact), 1e-12)) < 1e-3
    # oracle: directional derivative of the plug-in term from the closed-form Jacobian
    u = t / np.linalg.norm(t, axis=1, keepdims=True)
    jac = oracles.softmax_linear_jacobian(W, b, x)
    ref = np.mean((1 - 1 / p)[:, None] * np.einsum("ndk,nk->nd", jac, u), axis=0)
    assert np.max(np.abs(exact - ref)) < 1e-12


def test_finite_difference_constant_model_is_zero():
    x = np.random.default_rng(1).uniform(size=(5, 2))
    fd = finite_diff_theta(constant_model(), x, [0, 1, 0, 1, 1], np.ones_like(x), 1e-4, np.full(5, 0.5))
    np.testing.assert_array_equal(fd, 0.0)


def test_finite_difference_ignores_sample_order():
    rng = np.random.default_rng(2)
    model = linear_model(rng.normal(size=(3, 2)), rng.normal(size=3))
    x, y, t, p = rng.uniform(size=(9, 2)), rng.integers(0, 3, 9), rng.normal(size=(9, 2)), rng.uniform(0.2, 1, 9)
    perm = rng.permutation(9)
    a = finite_diff_theta(model, x, y, t, 1e-4, p)
    b = finite_diff_theta(model, x[perm], y[perm], t[perm], 1e-4, p[perm])
    np.testing.assert_allclose(a, b, atol=1e-9)
    with pytest.raises(ContractError):
        finite_diff_theta(model, x, y, t, 0.0, p)


def estimate(per_class, counts=None, norm="mean_abs"):
    per_class = np.asarray(per_class, dtype=np.float64)
    counts = np.ones(len(per_class), dtype=np.int64) if counts is None else np.asarray(counts)
    overall = float(np.dot(per_class, counts) / counts.sum())
    return CausalEstimate(per_class, counts, overall, per_class.copy(), np.arange(len(per_class)), norm)


def test_relative_ratio_examples():
    at = estimate([2.0, 4.0, 1.0, 1.0])
    adml = estimate([1.0, 4.0, 1.0, 0.5])
    acc = [0.2, 0.9, 0.5, 0.8]
    rho = relative_ratio(adml, at, acc, ks=(25, 50))
    assert rho["bottom_25"] == pytest.approx(50.0)
    assert rho["bottom_50"] == pytest.approx(100.0 * 2.0 / 3.0)
    assert rho["avg"] == pytest.approx(100.0 * 6.5 / 8.0)
    assert relative_ratio(at, at, acc)["avg"] == pytest.approx(100.0)


def test_relative_ratio_errors():
    at = estimate([0.0, 1.0])
    with pytest.raises(DegenerateDenominatorError):
        relative_ratio(estimate([1.0, 1.0]), at, [0.1, 0.9], ks=(50,))
    with pytest.raises(ContractError):
        relative_ratio(estimate([1.0, 1.0], norm="l2"), estimate([1.0, 1.0]), [0.1, 0.9])
    with pytest.raises(ContractError):
        relative_ratio(estimate([1.0, 1.0, 1.0]), estimate([1.0, 1.0]), [0.1, 0.9])


def test_bottom_k_classes():
    acc = [0.5, 0.1, 0.5, 0.9, 0.3]
    assert bottom_k_classes(acc, 10).tolist() == [1]
    assert bottom_k_classes(acc, 40).tolist() == [1, 4]
    assert bottom_k_classes(acc, 60).tolist() == [1, 4, 0]
    assert bottom_k_classes(acc, 100).tolist() == [1, 4, 0, 2, 3]
    with pytest.raises(ContractError):
        bottom_k_classes(acc, 0)


def test_causal_estimate_round_trip(tmp_path):
    est = estimate([0.5, 0.25, 0.0], counts=[2, 1, 3])
    est.metadata = {"checkpoint": "at"}
    path = est.save(tmp_path / "theta.json")
    back = CausalEstimate.load(path)
    assert back.to_dict() == est.to_dict()
    assert path.read_text() == back.save(tmp_path / "again.json").read_text()


def test_pooled_propensity_counts_selecting_flip():
    x = np.random.default_rng(0).uniform(size=(3, 2))
    cfg = AttackConfig(gamma=0.05, steps=3, random_start=True, seed=3)
    # restarts never flip label 1, so only the selecting confidence remains
    none = approx_propensity(constant_model(), x, np.ones(3, dtype=int), cfg, m=4)
    np.testing.assert_array_equal(pool_observed_flip(none, [0.6, 0.7, 0.8]), [0.6, 0.7, 0.8])
    every = approx_propensity(constant_model(), x, np.zeros(3, dtype=int), cfg, m=3)
    np.testing.assert_allclose(pool_observed_flip(every, [0.5, 0.5, 0.5]), (3 * 0.9 + 0.5) / 4, atol=1e-15)
    with pytest.raises(ContractError):
        pool_observed_flip(every, [0.5])
