"""Seeded random fixtures for checking every primitive against central differences."""

from __future__ import annotations

import numpy as np

from advcausal import tensor as T
from advcausal.models import ClassifierSpec, cross_entropy, init_classifier
from advcausal.tensor import Tape, Tensor

from oracles import central_difference, gradient_mismatch


def _away_from(rng, shape, kinks=(0.0,), gap=1e-2):
    # keep entries off the kinks so the FD stencil stays on one linear piece
    x = rng.normal(size=shape)
    for k in kinks:
        d = x - k
        x = np.where(np.abs(d) < gap, k + d + np.copysign(gap, d), x)
    return x


def _distinct_rows(rng, shape):
    # well-separated entries so the argmax is stable under the FD step
    n, d = shape
    return np.stack([rng.permutation(d) * 0.5 + rng.uniform(-0.1, 0.1, d) for _ in range(n)])


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(w)))


def primitive_cases():
    """(name, builder(rng) -> (fn(*tensors) -> Tensor, [arrays])) pairs."""
    cases = {
        "matmul": lambda r: (lambda a, b: T.matmul(a, b), [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "transpose": lambda r: (T.transpose, [r.normal(size=(3, 5))]),
        "add": lambda r: (T.add, [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
        "add_bias": lambda r: (T.add, [r.normal(size=(5, 3)), r.normal(size=3)]),
        "sub": lambda r: (T.sub, [r.normal(size=(2, 6)), r.normal(size=(2, 6))]),
        "sub_bias": lambda r: (T.sub, [r.normal(size=(4, 2)), r.normal(size=2)]),
        "neg": lambda r: (T.neg, [r.normal(size=(3, 3))]),
        "mul": lambda r: (T.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "scale": lambda r: (lambda a: T.mul(a, 1.7), [r.normal(size=(4,))]),
        "relu": lambda r: (T.relu, [_away_from(r, (4, 5))]),
        "softmax": lambda r: (T.softmax, [r.normal(size=(3, 5))]),
        "log": lambda r: (T.log, [r.uniform(0.2, 3.0, size=(3, 4))]),
        "exp": lambda r: (T.exp, [r.normal(scale=0.5, size=(2, 5))]),
        "sum_all": lambda r: (lambda a: T.sum_(a), [r.normal(size=(3, 4))]),
        "sum_axis1": lambda r: (lambda a: T.sum_(a, axis=1), [r.normal(size=(3, 4))]),
        "mean_axis0": lambda r: (lambda a: T.mean(a, axis=0), [r.normal(size=(5, 2))]),
        "max_last": lambda r: (lambda a: T.max_(a, axis=-1), [_distinct_rows(r, (4, 5))]),
        "clamp": lambda r: (lambda a: T.clamp(a, lo=-0.5, hi=0.5), [_away_from(r, (4, 4), kinks=(-0.5, 0.5))]),
        "sign": lambda r: (T.sign, [_away_from(r, (3, 3))]),
    }
    return cases


def check_primitive(name: str, seed: int) -> int:
    """Mismatching coordinates across every input of one seeded fixture."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, arrays = primitive_cases()[name](rng)
    probe = fn(*[Tensor(a) for a in arrays])
    w = rng.normal(size=probe.shape)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = _weighted(fn(*leaves), w)
    table = tape.backward(loss)
    bad = 0
    for i, leaf in enumerate(leaves):
        analytic = table.get(id(leaf), np.zeros_like(arrays[i]))

        def scalar(v, i=i):
            args = [Tensor(v if j == i else a) for j, a in enumerate(arrays)]
            return float(_weighted(fn(*args), w).data)

        bad += gradient_mismatch(analytic, central_difference(scalar, arrays[i]))
    return bad


def _min_preactivation(params, x) -> float:
    h, low = x, np.inf
    for i in range(0, len(params) - 2, 2):
        h = h @ params[i].T + params[i + 1]
        low = min(low, float(np.abs(h).min()))
        h = np.maximum(h, 0.0)
    return low


def check_mlp_ce(seed: int) -> int:
    """Composed loss: mean CE of a 2-hidden-layer MLP, parameters and inputs."""
    rng = np.random.default_rng([seed, 77])
    spec = ClassifierSpec(input_dim=3, hidden_dims=(5, 4), num_classes=3, init_seed=seed)
    model = init_classifier(spec)
    arrays = [p.data.copy() for p in model.params]
    x = rng.uniform(0, 1, size=(6, 3))
    while _min_preactivation(arrays, x) < 1e-3:
        # a ReLU input sitting on its kink has no derivative for FD to recover
        x = rng.uniform(0, 1, size=(6, 3))
    y = rng.integers(0, 3, size=6)

    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(model.predict_proba(xt), y)
    table = tape.backward(loss)

    def loss_at(params, xv):
        for p, a in zip(model.params, params):
            p.assign(a)
        value = float(cross_entropy(model.predict_proba(xv), y).data)
        for p, a in zip(model.params, arrays):
            p.assign(a)
        return value

    bad = gradient_mismatch(table[id(xt)], central_difference(lambda v: loss_at(arrays, v), x))
    for i, p in enumerate(model.params):
        def vary(v, i=i):
            return loss_at([v if j == i else a for j, a in enumerate(arrays)], x)
        bad += gradient_mismatch(table[id(p)], central_difference(vary, arrays[i]))
    return bad


def all_fixtures(seeds_per_primitive: int = 6, mlp_seeds: int = 6):
    for name in primitive_cases():
        for s in range(seeds_per_primitive):
            yield name, s
    for s in range(mlp_seeds):
        yield "mlp_ce", s


def run_fixture(name: str, seed: int) -> int:
    return check_mlp_ce(seed) if name == "mlp_ce" else check_primitive(name, seed)
