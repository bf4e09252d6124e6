"""Seeded synthetic tasks with known structure, and small delimited-text datasets."""

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, NonNegativeInt, PositiveInt, model_validator

VAR_FLOOR = 1e-8


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["planted-features", "teacher-student", "csv-classification"]
    input_dim: PositiveInt = 64
    classes: PositiveInt = 4
    output_dim: PositiveInt = 4
    n_train: NonNegativeInt = 4000
    n_val: NonNegativeInt = 1000
    n_test: NonNegativeInt = 2000
    informative: NonNegativeInt = 8
    rule_width: PositiveInt = 16
    teacher_width: PositiveInt = 32
    teacher_hidden: PositiveInt = 32
    teacher_blocks: PositiveInt = 2
    teacher_gain: float = 2.0
    noise: NonNegativeFloat = 0.0
    path: Optional[str] = None
    val_fraction: NonNegativeFloat = 0.15
    test_fraction: NonNegativeFloat = 0.15
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "planted-features" and self.informative > self.input_dim:
            raise ValueError(f"informative feature count {self.informative} exceeds input_dim {self.input_dim}")
        if self.kind == "csv-classification" and not self.path:
            raise ValueError("csv-classification needs a path")
        return self


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task: str  # "classification" or "regression"
    n_outputs: int
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.x_train.shape[-1]

    def split_hash(self):
        h = hashlib.sha256()
        for name in ("train", "val", "test"):
            h.update(np.asarray(self.splits[name], dtype=np.int64).tobytes())
        return h.hexdigest()


def _split(n_train, n_val, n_test):
    idx = np.arange(n_train + n_val + n_test)
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}


def _make(x, y, splits, task, n_outputs, meta):
    return Dataset(x[splits["train"]], y[splits["train"]], x[splits["val"]], y[splits["val"]],
                   x[splits["test"]], y[splits["test"]], task, n_outputs, splits, meta)


# ---------------------------------------------------------------- planted features


class PlantedRule:
    """Labels from a random two-layer rule applied to the informative coordinates only."""

    def __init__(self, informative, classes, width, rng):
        k = len(informative)
        self.informative = np.asarray(informative)
        self.hidden = rng.standard_normal((width, k)) * (2.0 / np.sqrt(k))
        self.out = rng.standard_normal((classes, width))
        self.bias = np.zeros(classes)
        # calibrate class biases on a reference sample so labels come out balanced
        ref = rng.standard_normal((20000, k))
        logits = self._logits(ref)
        for _ in range(300):
            freq = np.bincount(np.argmax(logits + self.bias, axis=1), minlength=classes) / len(ref)
            self.bias -= 0.5 * np.log(np.maximum(freq * classes, 1e-3))

    def _logits(self, xs):
        return np.tanh(xs @ self.hidden.T) @ self.out.T

    def __call__(self, x):
        return np.argmax(self._logits(x[:, self.informative]) + self.bias, axis=1)


def gen_planted_features(spec):
    if spec.kind != "planted-features":
        raise ValueError(f"expected a planted-features task, got {spec.kind!r}")
    if spec.informative == 0:
        raise ValueError("planted-features needs at least one informative coordinate")
    rng = np.random.default_rng(spec.seed)
    informative = np.sort(rng.choice(spec.input_dim, size=spec.informative, replace=False))
    rule = PlantedRule(informative, spec.classes, spec.rule_width, rng)
    n = spec.n_train + spec.n_val + spec.n_test
    x = rng.standard_normal((n, spec.input_dim))
    y = rule(x)
    if spec.noise > 0:
        flip = rng.random(n) < spec.noise
        y = np.where(flip, rng.integers(0, spec.classes, n), y)
    meta = {"informative": informative.tolist(), "classes": spec.classes}
    return _make(x, y.astype(np.int64), _split(spec.n_train, spec.n_val, spec.n_test),
                 "classification", spec.classes, meta)


# ---------------------------------------------------------------- teacher-student


def teacher_spec(spec, blocks=None):
    """Model spec of a residual teacher (or a student of the same shape with ``blocks`` blocks)."""
    return {
        "input_dim": spec.input_dim,
        "layers": [
            {"kind": "linear", "out": spec.teacher_width, "act": "none"},
            {"kind": "stage", "blocks": spec.teacher_blocks if blocks is None else blocks,
             "hidden": spec.teacher_hidden},
            {"kind": "linear", "out": spec.output_dim, "act": "none"},
        ],
    }


def gen_teacher_student(spec):
    """Regression targets from a seeded residual teacher with ``teacher_blocks`` blocks."""
    from .network import build_supernet

    if spec.kind != "teacher-student":
        raise ValueError(f"expected a teacher-student task, got {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    teacher = build_supernet(teacher_spec(spec), seed=int(rng.integers(2**31)))
    for blk in teacher.layers[1].blocks:
        blk.fc2.weight.data = blk.fc2.weight.data * spec.teacher_gain
    n = spec.n_train + spec.n_val + spec.n_test
    x = rng.standard_normal((n, spec.input_dim))
    raw = teacher.forward(x, masks=None).data
    # rescale the head so targets have unit variance per output
    scale = 1.0 / raw.std(axis=0)
    head = teacher.layers[2]
    head.weight.data = head.weight.data * scale[:, None]
    head.bias.data = head.bias.data * scale
    y = teacher.forward(x, masks=None).data
    if spec.noise > 0:
        y = y + spec.noise * rng.standard_normal(y.shape)
    meta = {"teacher_blocks": spec.teacher_blocks, "teacher_width": spec.teacher_width,
            "teacher_hidden": spec.teacher_hidden, "teacher_spec": teacher_spec(spec)}
    data = _make(x, y, _split(spec.n_train, spec.n_val, spec.n_test), "regression", spec.output_dim, meta)
    data.meta["teacher_state"] = teacher.state_dict()
    return data, teacher


# ---------------------------------------------------------------- csv


def load_csv_dataset(path, seed=0, val_fraction=0.15, test_fraction=0.15):
    """Float features with an integer label in the last column.

    Rows are put in a canonical order before the seeded shuffle, so the split
    does not depend on the row order of the file.  Features are standardized
    with train-split statistics.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        width = len(header)
        if width < 2:
            raise ValueError(f"{path}: need at least one feature column and a label column")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            try:
                feats = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has an unparseable cell") from None
            rows.append((feats, label))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    x = np.array([r[0] for r in rows], dtype=np.float64)
    y = np.array([r[1] for r in rows], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError(f"{path}: labels contain a single class")
    order = np.lexsort(np.column_stack([x, y]).T[::-1])
    x, y = x[order], y[order]
    perm = np.random.default_rng(seed).permutation(len(y))
    x, y = x[perm], y[perm]
    n = len(y)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    splits = _split(n - n_val - n_test, n_val, n_test)
    train = x[splits["train"]]
    mu = train.mean(axis=0)
    sd = np.sqrt(np.maximum(train.var(axis=0), VAR_FLOOR))
    x = (x - mu) / sd
    labels = np.unique(y)
    return _make(x, y, splits, "classification", int(labels.max()) + 1,
                 {"path": str(path), "mean": mu.tolist(), "std": sd.tolist()})


def make_task(spec):
    """Dataset for a task spec; teacher-student also records the teacher in ``meta``."""
    if spec.kind == "planted-features":
        return gen_planted_features(spec)
    if spec.kind == "teacher-student":
        return gen_teacher_student(spec)[0]
    return load_csv_dataset(spec.path, seed=spec.seed, val_fraction=spec.val_fraction,
                            test_fraction=spec.test_fraction)
