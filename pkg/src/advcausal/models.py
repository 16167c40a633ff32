"""Small MLP classifiers, cross-entropy, SGD and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .tensor import Tape, Tensor

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims)
        if any(int(d) <= 0 for d in dims):
            raise ContractError(f"ClassifierSpec: dimensions must be positive, got {dims}")
        if self.num_classes < 2:
            raise ContractError("ClassifierSpec: num_classes must be >= 2")
        if self.activation != "relu":
            raise ContractError(f"ClassifierSpec: unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per dense layer."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


class Classifier:
    """MLP mapping (batch, input_dim) inputs to class logits / probabilities.

    Parameters are stored as ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
    ``(fan_out, fan_in)``. ``provenance`` records which training procedure
    last produced the weights ("init", "clean", "at", "trades", "adml_over_at", ...).
    """

    def __init__(self, spec: ClassifierSpec, params: list[Tensor], provenance: str = "init"):
        expected = []
        for fan_in, fan_out in spec.layer_dims:
            expected += [(fan_out, fan_in), (fan_out,)]
        got = [p.shape for p in params]
        if got != expected:
            raise DimensionError(f"Classifier: parameter shapes {got} do not match spec {expected}")
        self.spec = spec
        self.params = params
        self.provenance = provenance

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def logits(self, x, frozen: bool = False) -> Tensor:
        """Pre-softmax scores. ``frozen`` keeps parameters out of the tape."""
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"Classifier: expected input shape (batch, {self.spec.input_dim}), got {x.shape}")
        params = [Tensor._wrap(p.data) for p in self.params] if frozen else self.params
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            h = T.add(T.matmul(h, T.transpose(w)), b)
            if i < n_layers - 1:
                h = T.relu(h)
        return h

    def predict_proba(self, x, frozen: bool = False) -> Tensor:
        return T.softmax(self.logits(x, frozen=frozen))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(np.asarray(x)).data, axis=1)

    def copy(self) -> "Classifier":
        params = [Tensor(p.data, requires_grad=p.requires_grad) for p in self.params]
        return Classifier(self.spec, params, self.provenance)

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def init_classifier(spec: ClassifierSpec) -> Classifier:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    params = []
    for fan_in, fan_out in spec.layer_dims:
        bound = math.sqrt(6.0 / fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Classifier(spec, params)


def predict_proba(model: Classifier, x) -> Tensor:
    return model.predict_proba(x)


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _check_labels(y, n: int, d: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ContractError(f"labels: expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= d):
        raise ContractError(f"labels: values must lie in [0, {d}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def per_sample_cross_entropy(probs: Tensor, y) -> Tensor:
    """-log p[i, y_i] with the probability floored at PROB_FLOOR."""
    probs = T.as_tensor(probs)
    n, d = probs.shape
    y = _check_labels(y, n, d)
    logp = T.log(T.clamp(probs, lo=PROB_FLOOR))
    return T.neg(T.sum_(T.mul(logp, Tensor._wrap(one_hot(y, d))), axis=1))


def cross_entropy(probs: Tensor, y) -> Tensor:
    return T.mean(per_sample_cross_entropy(probs, y))


def accuracy(model: Classifier, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    return float(np.mean(model.predict(x) == y))


# ---------------------------------------------------------------- gradients

LOSS_KINDS = ("ce", "prob", "cw")


def cw_margin(logits: Tensor, y, kappa: float = 0.0) -> Tensor:
    """Per-sample max(z_y - max_{j != y} z_j, -kappa)."""
    n, d = logits.shape
    if d < 2:
        raise ContractError("cw_margin: needs at least two classes")
    y = _check_labels(y, n, d)
    oh = one_hot(y, d)
    z_true = T.sum_(T.mul(logits, Tensor._wrap(oh)), axis=1)
    # push the true class far below every other logit before taking the max
    spread = float(np.ptp(logits.data)) + 1.0 if logits.size else 1.0
    z_other = T.max_(T.sub(logits, Tensor._wrap(oh * spread * 2.0)), axis=1)
    return T.clamp(T.sub(z_true, z_other), lo=-kappa)


def grad_wrt_input(model: Classifier, x, y=None, loss_kind: str = "ce", kappa: float = 0.0) -> np.ndarray:
    """Input gradient at frozen parameters.

    ``ce``: per-sample d CE_i / d x_i, shape (batch, input_dim).
    ``cw``: per-sample d(-margin_i) / d x_i, the CW ascent direction.
    ``prob``: Jacobian of the probability vector, shape (batch, d, input_dim).
    """
    x = np.asarray(x, dtype=np.float64)
    if loss_kind not in LOSS_KINDS:
        raise ContractError(f"grad_wrt_input: unknown loss_kind {loss_kind!r}")
    if loss_kind != "prob":
        if y is None:
            raise ContractError("grad_wrt_input: labels required")
        _check_labels(y, x.shape[0], model.num_classes)

    if loss_kind == "prob":
        d = model.num_classes
        jac = np.empty((x.shape[0], d, x.shape[1]))
        for j in range(d):
            xt = Tensor(x, requires_grad=True)
            with Tape() as tape:
                probs = model.predict_proba(xt, frozen=True)
                sel = np.zeros((x.shape[0], d))
                sel[:, j] = 1.0
                out = T.sum_(T.mul(probs, Tensor._wrap(sel)))
            jac[:, j, :] = tape.backward(out).get(id(xt), np.zeros_like(x))
        return jac

    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        if loss_kind == "ce":
            loss = T.sum_(per_sample_cross_entropy(model.predict_proba(xt, frozen=True), y))
        else:
            loss = T.neg(T.sum_(cw_margin(model.logits(xt, frozen=True), y, kappa)))
    return tape.backward(loss).get(id(xt), np.zeros_like(x))


def parameter_gradients(model: Classifier, loss_fn: Callable[[Classifier], Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn(model)`` on a fresh tape and return (loss, grads per parameter)."""
    with Tape() as tape:
        loss = loss_fn(model)
    table = tape.backward(loss)
    grads = [table.get(id(p), np.zeros_like(p.data)) for p in model.params]
    return float(loss.data), grads


# ---------------------------------------------------------------- optimisation

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.1
    lr_schedule: str = "cyclic"
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    early_stopping_patience: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ContractError(f"TrainConfig: invalid values {asdict(self)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("TrainConfig: momentum must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cyclic"):
            raise ContractError(f"TrainConfig: unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer != "sgd":
            raise ContractError(f"TrainConfig: unknown optimizer {self.optimizer!r}")


def scheduled_lr(config: TrainConfig, progress: float) -> float:
    """Learning rate at ``progress`` in [0, 1] through training.

    The cyclic schedule is one triangular cycle: 0 -> peak at the midpoint -> 0.
    """
    if config.lr_schedule == "constant":
        return config.learning_rate
    progress = min(max(progress, 0.0), 1.0)
    return config.learning_rate * (1.0 - abs(2.0 * progress - 1.0))


@dataclass
class SGD:
    """Plain / momentum SGD. One buffer per parameter, created lazily."""

    momentum: float = 0.0
    buffers: list = field(default_factory=list)

    def step(self, model: Classifier, grads: list[np.ndarray], lr: float) -> Classifier:
        if len(grads) != len(model.params):
            raise ContractError(f"sgd_step: expected {len(model.params)} gradients, got {len(grads)}")
        for p, g in zip(model.params, grads):
            if np.shape(g) != p.shape:
                raise DimensionError(f"sgd_step: gradient shape {np.shape(g)} vs parameter {p.shape}")
        if not self.buffers:
            self.buffers = [np.zeros_like(p.data) for p in model.params]
        for i, (p, g) in enumerate(zip(model.params, grads)):
            self.buffers[i] = self.momentum * self.buffers[i] + g
            p.assign(p.data - lr * self.buffers[i])
        return model


def sgd_step(model: Classifier, grads: list[np.ndarray], config: TrainConfig,
             lr: float | None = None, state: SGD | None = None) -> Classifier:
    state = state if state is not None else SGD(momentum=config.momentum)
    return state.step(model, grads, config.learning_rate if lr is None else lr)


def fit(model: Classifier, x, y, config: TrainConfig,
        batch_loss: Callable[[Classifier, np.ndarray, np.ndarray, int], Tensor] | None = None,
        on_epoch: Callable[[int, Classifier, float, float], bool | None] | None = None) -> Classifier:
    """Minibatch SGD driver shared by every trainer.

    ``batch_loss(model, xb, yb, step)`` builds the scalar loss on the active
    tape; it defaults to clean cross-entropy. ``on_epoch(epoch, model,
    mean_loss, lr)`` may return True to stop early.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y, x.shape[0], model.num_classes)
    if batch_loss is None:
        def batch_loss(m, xb, yb, step):
            return cross_entropy(m.predict_proba(xb), yb)

    rng = np.random.default_rng(config.seed)
    opt = SGD(momentum=config.momentum)
    n = x.shape[0]
    per_epoch = max(1, math.ceil(n / config.batch_size))
    total = config.epochs * per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        lr = config.learning_rate
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = scheduled_lr(config, (step + 0.5) / total)
            loss, grads = parameter_gradients(model, lambda m: batch_loss(m, x[idx], y[idx], step))
            opt.step(model, grads, lr)
            losses.append(loss)
            step += 1
        if on_epoch is not None and on_epoch(epoch, model, float(np.mean(losses)), lr):
            break
    return model


# ---------------------------------------------------------------- checkpoints

def checkpoint_dict(model: Classifier) -> dict:
    return {
        "format": "advcausal-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": {**asdict(model.spec), "hidden_dims": list(model.spec.hidden_dims)},
        "provenance": model.provenance,
        "params": [{"shape": list(p.shape), "data": p.data.ravel().tolist()} for p in model.params],
    }


def classifier_from_dict(blob: dict) -> Classifier:
    if blob.get("format") != "advcausal-checkpoint":
        raise FormatError("not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {blob.get('version')!r}")
    spec = ClassifierSpec(**blob["spec"])
    params = [Tensor(np.array(p["data"], dtype=np.float64).reshape(p["shape"]), requires_grad=True)
              for p in blob["params"]]
    return Classifier(spec, params, blob.get("provenance", "init"))


def save_checkpoint(model: Classifier, path) -> Path:
    # json writes floats via repr(), which round-trips f64 exactly
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model), sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Classifier:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid checkpoint JSON: {exc.msg}", offset=exc.pos) from exc
    return classifier_from_dict(blob)
