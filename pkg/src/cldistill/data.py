"""Datasets, class-incremental task splits, and PK batch sampling.

A dataset keeps all samples in dense arrays together with a train/test
membership mask. Split builders partition the *classes* (seeded shuffle,
then contiguous chunks) into a sequence of disjoint tasks, optionally with
a pretrain half.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    EmptyDataset,
    IndivisibleSplit,
    InsufficientClasses,
)


@dataclass(frozen=True)
class BatchSpec:
    """P classes times K samples per class; K >= 2 guarantees positives."""

    num_classes_per_batch: int = 8
    samples_per_class: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes_per_batch < 1:
            raise ConfigError("num_classes_per_batch must be positive")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")

    @property
    def batch_size(self) -> int:
        return self.num_classes_per_batch * self.samples_per_class


@dataclass(frozen=True)
class Split:
    """A set of samples assigned to one task (or the pretrain stage)."""

    inputs: np.ndarray  # (N, ...) float64
    labels: np.ndarray  # (N,) int64, global class ids
    task: int  # task index in [1, T]; 0 for the pretrain split

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels length mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True)
class Task:
    train: Split
    test: Split
    class_ids: tuple  # global class ids assigned to this task


@dataclass(frozen=True)
class Dataset:
    """Full labelled dataset with a canonical train/test division."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray  # (N,) bool, True for canonical train samples

    def __post_init__(self):
        if len(self.labels) == 0:
            raise EmptyDataset(f"dataset {self.name!r} has no samples")
        present = np.unique(self.labels)
        if present.min() < 0 or present.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")
        if len(present) != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"classes with no samples: {missing[:10]}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple  # tuple of Task
    pretrain: Task | None = None
    class_map: tuple = ()  # per-task tuples of global class ids

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_class_ids(self) -> set:
        ids = set()
        if self.pretrain is not None:
            ids |= set(self.pretrain.class_ids)
        for t in self.tasks:
            ids |= set(t.class_ids)
        return ids


def _subset(dataset: Dataset, class_ids, task_index: int) -> Task:
    cls = np.asarray(sorted(class_ids))
    member = np.isin(dataset.labels, cls)
    tr = member & dataset.train_mask
    te = member & ~dataset.train_mask
    train = Split(dataset.inputs[tr], dataset.labels[tr], task_index)
    test = Split(dataset.inputs[te], dataset.labels[te], task_index)
    return Task(train=train, test=test, class_ids=tuple(int(c) for c in cls))


def _shuffled_classes(num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.permutation(num_classes)


def split_even(dataset: Dataset, num_tasks: int, seed: int = 0) -> TaskSequence:
    """Evenly split the classes into `num_tasks` disjoint tasks."""
    if len(dataset) == 0:
        raise EmptyDataset(dataset.name)
    if num_tasks < 1 or dataset.num_classes % num_tasks != 0:
        raise IndivisibleSplit(
            f"{num_tasks} tasks do not divide {dataset.num_classes} classes"
        )
    order = _shuffled_classes(dataset.num_classes, seed)
    per_task = dataset.num_classes // num_tasks
    tasks = []
    for k in range(num_tasks):
        ids = order[k * per_task : (k + 1) * per_task]
        tasks.append(_subset(dataset, ids, k + 1))
    return TaskSequence(
        tasks=tuple(tasks),
        pretrain=None,
        class_map=tuple(t.class_ids for t in tasks),
    )


def split_half_pretrain(dataset: Dataset, num_tasks: int, seed: int = 0) -> TaskSequence:
    """Half the classes pretrain the model; the rest form `num_tasks` tasks."""
    if len(dataset) == 0:
        raise EmptyDataset(dataset.name)
    if dataset.num_classes % 2 != 0:
        raise IndivisibleSplit(f"{dataset.num_classes} classes are not even")
    half = dataset.num_classes // 2
    if num_tasks < 1 or half % num_tasks != 0:
        raise IndivisibleSplit(f"{num_tasks} tasks do not divide {half} classes")
    order = _shuffled_classes(dataset.num_classes, seed)
    pretrain = _subset(dataset, order[:half], 0)
    per_task = half // num_tasks
    tasks = []
    for k in range(num_tasks):
        ids = order[half + k * per_task : half + (k + 1) * per_task]
        tasks.append(_subset(dataset, ids, k + 1))
    return TaskSequence(
        tasks=tuple(tasks),
        pretrain=pretrain,
        class_map=tuple(t.class_ids for t in tasks),
    )


def merge_tasks(seq: TaskSequence) -> TaskSequence:
    """Collapse a sequence (pretrain included) into one joint-training task."""
    parts = list(seq.tasks)
    if seq.pretrain is not None:
        parts = [seq.pretrain] + parts
    tr_in = np.concatenate([p.train.inputs for p in parts])
    tr_lab = np.concatenate([p.train.labels for p in parts])
    te_in = np.concatenate([p.test.inputs for p in parts])
    te_lab = np.concatenate([p.test.labels for p in parts])
    ids = tuple(sorted({c for p in parts for c in p.class_ids}))
    joint = Task(
        train=Split(tr_in, tr_lab, 1),
        test=Split(te_in, te_lab, 1),
        class_ids=ids,
    )
    return TaskSequence(tasks=(joint,), pretrain=None, class_map=(ids,))


@dataclass(frozen=True)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def sample_pk_batch(
    split: Split, spec: BatchSpec, rng: np.random.Generator
) -> LabeledBatch:
    """Draw P classes and K samples each; deterministic given the rng state.

    Classes with fewer than K samples are drawn with replacement.
    """
    classes = split.class_ids
    p = spec.num_classes_per_batch
    k = spec.samples_per_class
    if len(classes) < p:
        raise InsufficientClasses(
            f"split has {len(classes)} classes, batch needs {p}"
        )
    chosen = rng.choice(classes, size=p, replace=False)
    rows = []
    for c in chosen:
        idx = np.flatnonzero(split.labels == c)
        rows.append(rng.choice(idx, size=k, replace=len(idx) < k))
    rows = np.concatenate(rows)
    return LabeledBatch(inputs=split.inputs[rows], labels=split.labels[rows])


# ---------------------------------------------------------------------------
# Synthetic data and loaders


def make_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float = 1.0,
    seed: int = 0,
    test_fraction: float = 0.2,
    name: str = "blobs",
) -> Dataset:
    """Gaussian blob classes in `dim` dimensions; 20% per class held out."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 4.0, size=(num_classes, dim))
    inputs, labels, train_mask = [], [], []
    n_test = max(1, int(round(per_class * test_fraction)))
    for c in range(num_classes):
        x = centers[c] + rng.normal(0.0, spread, size=(per_class, dim))
        inputs.append(x)
        labels.append(np.full(per_class, c, dtype=np.int64))
        m = np.ones(per_class, dtype=bool)
        m[per_class - n_test :] = False
        train_mask.append(m)
    return Dataset(
        name=name,
        inputs=np.concatenate(inputs).astype(np.float64),
        labels=np.concatenate(labels),
        num_classes=num_classes,
        train_mask=np.concatenate(train_mask),
    )


def write_manifest(path: str, entries: dict):
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k}: {v}\n")


def read_manifest(path: str) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            entries[key.strip()] = value.strip()
    return entries


def save_dataset_csv(dataset: Dataset, out_dir: str):
    """Write a dataset as manifest.txt + data.csv (split,label,x0..xd)."""
    os.makedirs(out_dir, exist_ok=True)
    flat = dataset.inputs.reshape(len(dataset), -1)
    csv_path = os.path.join(out_dir, "data.csv")
    with open(csv_path, "w") as fh:
        cols = ",".join(f"x{i}" for i in range(flat.shape[1]))
        fh.write(f"split,label,{cols}\n")
        for i in range(len(dataset)):
            part = "train" if dataset.train_mask[i] else "test"
            vals = ",".join(repr(float(v)) for v in flat[i])
            fh.write(f"{part},{dataset.labels[i]},{vals}\n")
    write_manifest(
        os.path.join(out_dir, "manifest.txt"),
        {
            "name": dataset.name,
            "num_classes": dataset.num_classes,
            "input_shape": "x".join(str(s) for s in dataset.inputs.shape[1:]),
            "format": "csv",
            "data": "data.csv",
        },
    )


def _load_csv(manifest: dict, base: str) -> Dataset:
    path = os.path.join(base, manifest.get("data", "data.csv"))
    labels, masks, rows = [], [], []
    with open(path) as fh:
        next(fh)  # header
        for line in fh:
            parts = line.rstrip("\n").split(",")
            masks.append(parts[0] == "train")
            labels.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
    shape = tuple(int(s) for s in manifest["input_shape"].split("x"))
    inputs = np.asarray(rows, dtype=np.float64).reshape(len(rows), *shape)
    return Dataset(
        name=manifest["name"],
        inputs=inputs,
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=int(manifest["num_classes"]),
        train_mask=np.asarray(masks, dtype=bool),
    )


def _load_imagedir(manifest: dict, base: str) -> Dataset:
    """Per-class subdirectories of images under train/ and test/ roots."""
    from PIL import Image

    class_names = sorted(
        d for d in os.listdir(os.path.join(base, "train"))
        if os.path.isdir(os.path.join(base, "train", d))
    )
    class_to_id = {c: i for i, c in enumerate(class_names)}
    inputs, labels, masks = [], [], []
    for part, is_train in (("train", True), ("test", False)):
        root = os.path.join(base, part)
        if not os.path.isdir(root):
            continue
        for cname in sorted(os.listdir(root)):
            cdir = os.path.join(root, cname)
            if not os.path.isdir(cdir):
                continue
            for fname in sorted(os.listdir(cdir)):
                img = Image.open(os.path.join(cdir, fname))
                inputs.append(np.asarray(img, dtype=np.float64) / 255.0)
                labels.append(class_to_id[cname])
                masks.append(is_train)
    return Dataset(
        name=manifest["name"],
        inputs=np.stack(inputs),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=int(manifest["num_classes"]),
        train_mask=np.asarray(masks, dtype=bool),
    )


def load_dataset(manifest_path: str) -> Dataset:
    """Load a dataset described by a key-value manifest file.

    Supported formats: 'csv' (flattened vectors with a label column) and
    'imagedir' (per-class subdirectories of images).
    """
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    fmt = manifest.get("format", "csv")
    if fmt == "csv":
        return _load_csv(manifest, base)
    if fmt == "imagedir":
        return _load_imagedir(manifest, base)
    raise ConfigError(f"unknown dataset format {fmt!r}")
