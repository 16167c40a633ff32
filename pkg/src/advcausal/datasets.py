"""Synthetic benchmarks with per-class margins, plus IDX / CSV ingestion."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

DATASET_VERSION = 1


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    normalization: dict | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"LabeledDataset: {self.inputs.shape[0] if self.inputs.ndim else 0} inputs "
                f"vs {self.labels.shape[0]} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ContractError("LabeledDataset: inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("LabeledDataset: label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_classes": int(self.num_classes),
            "shape": list(self.inputs.shape),
            "inputs": self.inputs.ravel().tolist(),
            "labels": self.labels.tolist(),
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "LabeledDataset":
        inputs = np.array(blob["inputs"], dtype=np.float64).reshape(blob["shape"])
        return cls(inputs, np.array(blob["labels"], dtype=np.int64), blob["num_classes"],
                   blob.get("split", "train"), blob.get("normalization"))


@dataclass
class DatasetPair:
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic benchmark.

    ``class_margin[k]`` is the distance of class ``k``'s centre from the origin
    (gaussian_mixture) or the radial gap below ring ``k`` (rings). Small
    margins put a class close to its neighbours' decision boundaries.
    """

    kind: str = "gaussian_mixture"
    num_classes: int = 2
    samples_per_class: int | list = 100
    input_dim: int = 2
    class_margin: float | list = 1.0
    noise_scale: float = 0.1
    seed: int = 0
    test_ratio: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("SyntheticSpec: at least two classes required")
        if isinstance(self.samples_per_class, int):
            self.samples_per_class = [self.samples_per_class] * self.num_classes
        if isinstance(self.class_margin, (int, float)):
            self.class_margin = [float(self.class_margin)] * self.num_classes
        self.samples_per_class = [int(c) for c in self.samples_per_class]
        self.class_margin = [float(m) for m in self.class_margin]
        if len(self.samples_per_class) != self.num_classes or len(self.class_margin) != self.num_classes:
            raise ContractError("SyntheticSpec: per-class lists must have num_classes entries")
        if min(self.class_margin) <= 0:
            raise ContractError("SyntheticSpec: class margins must be positive")
        if min(self.samples_per_class) < 1:
            raise ContractError("SyntheticSpec: every class needs at least one sample")
        if self.kind not in ("gaussian_mixture", "rings"):
            raise ContractError(f"SyntheticSpec: unknown kind {self.kind!r}")
        if self.input_dim < 2 and self.kind == "rings":
            raise ContractError("SyntheticSpec: rings need input_dim >= 2")
        if self.noise_scale < 0 or not 0.0 <= self.test_ratio < 1.0:
            raise ContractError("SyntheticSpec: invalid noise_scale / test_ratio")


def _directions(num_classes: int, input_dim: int) -> np.ndarray:
    if input_dim >= num_classes:
        return np.eye(num_classes, input_dim)
    if input_dim < 2:
        raise ContractError("gen_synthetic: need input_dim >= 2 when input_dim < num_classes")
    dirs = np.zeros((num_classes, input_dim))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    dirs[:, 0], dirs[:, 1] = np.cos(angles), np.sin(angles)
    return dirs


def _stratified_split(labels: np.ndarray, ratio: float, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_test = int(round(ratio * idx.size))
        if ratio > 0 and idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def gen_synthetic(spec: SyntheticSpec) -> DatasetPair:
    rng = np.random.default_rng(spec.seed)
    parts, labels = [], []
    if spec.kind == "gaussian_mixture":
        centres = _directions(spec.num_classes, spec.input_dim) * np.array(spec.class_margin)[:, None]
        for k, count in enumerate(spec.samples_per_class):
            parts.append(centres[k] + spec.noise_scale * rng.standard_normal((count, spec.input_dim)))
            labels.append(np.full(count, k))
    else:
        radii = np.cumsum(spec.class_margin)
        for k, count in enumerate(spec.samples_per_class):
            direction = rng.standard_normal((count, spec.input_dim))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            r = radii[k] + spec.noise_scale * rng.standard_normal(count)
            parts.append(direction * r[:, None])
            labels.append(np.full(count, k))
    x = np.concatenate(parts)
    y = np.concatenate(labels).astype(np.int64)

    # one isotropic scale keeps the geometry (and l-inf budgets) comparable across axes
    lo = x.min(axis=0)
    span = float((x.max(axis=0) - lo).max()) or 1.0
    x = np.clip((x - lo) / span, 0.0, 1.0)
    norm = {"offset": lo.tolist(), "scale": span}

    tr, te = _stratified_split(y, spec.test_ratio, rng)
    return DatasetPair(
        LabeledDataset(x[tr], y[tr], spec.num_classes, "train", norm),
        LabeledDataset(x[te], y[te], spec.num_classes, "test", norm),
    )


def split_dataset(data: LabeledDataset, test_ratio: float = 0.2, seed: int = 0) -> DatasetPair:
    """Stratified train/test split of an ingested dataset."""
    tr, te = _stratified_split(data.labels, test_ratio, np.random.default_rng(seed))
    return DatasetPair(
        LabeledDataset(data.inputs[tr], data.labels[tr], data.num_classes, "train", data.normalization),
        LabeledDataset(data.inputs[te], data.labels[te], data.num_classes, "test", data.normalization),
    )


# ---------------------------------------------------------------- IDX

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(payload)}",
                          offset=header_end + len(payload))
    if len(payload) > need:
        raise FormatError(f"{path}: {len(payload) - need} trailing bytes", offset=header_end + need)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}", offset=4)
    d = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 2
    if labels.size and labels.max() >= d:
        raise FormatError(f"{labels_path}: label {labels.max()} >= num_classes {d}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels, max(d, 2), split, {"offset": 0.0, "scale": 255.0})


# ---------------------------------------------------------------- CSV

def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_csv(path, label_column: int | str = -1, num_classes: int | None = None,
             normalization: dict | None = None, split: str = "train") -> LabeledDataset:
    """Numeric CSV -> dataset. Features are min-max scaled per column.

    Pass the ``normalization`` recorded on a training split to reuse its
    constants on a test split (values are then clipped into [0, 1]).
    Constant columns map to 0.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty CSV", row=1)
    header = None
    first_data_row = 1
    if not all(_is_number(c) for c in rows[0]):
        header, rows = rows[0], rows[1:]
        first_data_row = 2
    if not rows:
        raise FormatError(f"{path}: no data rows", row=first_data_row)
    width = len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise FormatError(f"{path}: label column {label_column!r} not found", row=1)
        label_column = header.index(label_column)
    if not -width <= label_column < width:
        raise FormatError(f"{path}: label column {label_column} out of range for {width} columns", row=1)
    label_column %= width

    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: expected {width} cells, found {len(row)}", row=i + first_data_row)
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} in column {j}",
                                  row=i + first_data_row) from None
    raw_labels = values[:, label_column]
    if np.any(raw_labels != np.round(raw_labels)) or np.any(raw_labels < 0):
        bad = int(np.flatnonzero((raw_labels != np.round(raw_labels)) | (raw_labels < 0))[0])
        raise FormatError(f"{path}: labels must be non-negative integers", row=bad + first_data_row)
    labels = raw_labels.astype(np.int64)
    d = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    if labels.max() >= d:
        bad = int(np.flatnonzero(labels >= d)[0])
        raise FormatError(f"{path}: label {labels[bad]} >= num_classes {d}", row=bad + first_data_row)

    feats = np.delete(values, label_column, axis=1)
    if normalization is None:
        lo = feats.min(axis=0)
        span = feats.max(axis=0) - lo
        normalization = {"offset": lo.tolist(), "scale": span.tolist()}
    lo = np.asarray(normalization["offset"], dtype=np.float64)
    span = np.asarray(normalization["scale"], dtype=np.float64)
    safe = np.where(span > 0, span, 1.0)
    x = np.where(span > 0, (feats - lo) / safe, 0.0)
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, d, split, normalization)


# ---------------------------------------------------------------- cache file

def save_datasets(pair: DatasetPair, path) -> Path:
    path = Path(path)
    blob = {"format": "advcausal-dataset", "version": DATASET_VERSION,
            "train": pair.train.to_dict(), "test": pair.test.to_dict()}
    path.write_text(json.dumps(blob, sort_keys=True) + "\n")
    return path


def load_datasets(path) -> DatasetPair:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid dataset JSON: {exc.msg}", offset=exc.pos) from exc
    if blob.get("format") != "advcausal-dataset" or blob.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    return DatasetPair(LabeledDataset.from_dict(blob["train"]), LabeledDataset.from_dict(blob["test"]))
