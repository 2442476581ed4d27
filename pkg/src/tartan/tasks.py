"""Tasks and datasets: CSV ingestion, synthetic generators, masked-feature
reconstruction objectives, and deterministic batch sampling.

A task pairs an objective kind with a dataset. Auxiliary reconstruction
tasks mask features i.i.d. per batch (dynamic masking) and feed the model
``[masked features ; 0/1 mask indicator]``, doubling the input width; when a
model mixes such tasks with classification tasks, the classification inputs
are padded with an all-zero indicator half so every head shares one body.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import HeadSpec
from .prng import substream

OBJECTIVES = ("cross_entropy", "mse", "masked_mse")
RELATEDNESS_MODES = ("same_teacher", "independent_teacher", "random_labels")


@dataclass
class LabeledDataset:
    features: np.ndarray                       # [m, d] float64
    targets: np.ndarray                        # int labels [m] or float vectors [m, k]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    label_mapping: Optional[Dict[str, int]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty [m x d] matrix")
        m = self.features.shape[0]
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        all_idx = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if all_idx.size and (all_idx.min() < 0 or all_idx.max() >= m):
            raise ValueError("split index out of range")
        if len(set(all_idx.tolist())) != all_idx.size:
            raise ValueError("splits must be disjoint")

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]


@dataclass
class Task:
    task_id: str
    objective: str                             # one of OBJECTIVES
    dataset: LabeledDataset
    head_spec: HeadSpec
    mask_prob: float = 0.0                     # masked_mse tasks only
    mask_seed: int = 0                         # owns the masking substream
    pad_indicator: bool = False                # feed [x ; zeros] for widened bodies

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "cross_entropy" and self.dataset.targets.dtype.kind not in "iu":
            raise ValueError("cross_entropy needs integer labels")
        if self.objective == "masked_mse" and not (0.0 < self.mask_prob < 1.0):
            raise ValueError("masked_mse task needs 0 < mask_prob < 1")

    @property
    def input_width(self) -> int:
        d = self.dataset.num_features
        return 2 * d if (self.objective == "masked_mse" or self.pad_indicator) else d


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray] = None          # loss mask for masked_mse
    rows: Optional[np.ndarray] = None          # dataset row indices drawn


def sample_batch(task: Task, root_seed: int, step: int, batch_size: int,
                 split: str = "train") -> Batch:
    """Draw one batch for a training step.

    Rows are sampled with replacement from the split via the ``data``
    substream keyed by (task_id, split, step); masked positions come from the
    ``masking`` substream keyed by (task.mask_seed, task_id, step), so masks
    are fully determined by (dataset, mask_prob, seed, step).
    """
    idx = task.dataset.split(split)
    if idx.size == 0:
        raise ValueError(f"task {task.task_id!r} has an empty {split!r} split")
    rng = substream(root_seed, "data", task.task_id, split, step)
    rows = idx[rng.integers(0, idx.size, size=batch_size)]
    return materialize_batch(task, rows, step)


def materialize_batch(task: Task, rows: np.ndarray, step: int = 0) -> Batch:
    """Build model-ready arrays for the given dataset rows."""
    x = task.dataset.features[rows]
    if task.objective == "masked_mse":
        mask_rng = substream(task.mask_seed, "masking", task.task_id, step)
        mask = (mask_rng.random(x.shape) < task.mask_prob).astype(np.float64)
        inputs = np.hstack([x * (1.0 - mask), mask])
        targets = np.hstack([x, np.zeros_like(x)])
        loss_mask = np.hstack([mask, np.zeros_like(mask)])
        return Batch(inputs=inputs, targets=targets, mask=loss_mask, rows=rows)
    inputs = np.hstack([x, np.zeros_like(x)]) if task.pad_indicator else x
    return Batch(inputs=inputs, targets=task.dataset.targets[rows], rows=rows)


def full_split_batch(task: Task, split: str) -> Batch:
    """Every row of a split, in order, without masking (for evaluation)."""
    rows = task.dataset.split(split)
    if rows.size == 0:
        raise ValueError(f"task {task.task_id!r} has an empty {split!r} split")
    x = task.dataset.features[rows]
    inputs = np.hstack([x, np.zeros_like(x)]) if (task.pad_indicator or task.objective == "masked_mse") else x
    return Batch(inputs=inputs, targets=task.dataset.targets[rows], rows=rows)


def load_csv_dataset(path, label_column: str, split_fractions: Sequence[float],
                     seed: int) -> LabeledDataset:
    """Read a UTF-8, comma-separated file with a header row.

    Rows are shuffled by seed and split by floor(fraction * m); classification
    labels are mapped to contiguous integers in lexicographic order and the
    mapping recorded on the dataset.
    """
    fractions = tuple(float(f) for f in split_fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError("need three positive split fractions summing to <= 1")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty file")
        if label_column not in header:
            raise ValueError(f"label column {label_column!r} not in header {header}")
        label_pos = header.index(label_column)
        feature_pos = [i for i in range(len(header)) if i != label_pos]
        feats: List[List[float]] = []
        labels: List[str] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"ragged row at line {lineno}: {len(row)} fields, expected {len(header)}")
            try:
                feats.append([float(row[i]) for i in feature_pos])
            except ValueError as exc:
                raise ValueError(f"non-numeric feature at line {lineno}: {exc}") from None
            labels.append(row[label_pos])
    if not feats:
        raise ValueError("no data rows")
    features = np.asarray(feats, dtype=np.float64)
    mapping = {lab: i for i, lab in enumerate(sorted(set(labels)))}
    targets = np.asarray([mapping[lab] for lab in labels], dtype=np.int64)

    m = features.shape[0]
    perm = substream(seed, "data", "csv-shuffle").permutation(m)
    n_train = math.floor(fractions[0] * m)
    n_val = math.floor(fractions[1] * m)
    n_test = math.floor(fractions[2] * m)
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(f"empty split from fractions {fractions} on {m} rows")
    train = perm[:n_train]
    val = perm[n_train:n_train + n_val]
    test = perm[n_train + n_val:n_train + n_val + n_test]
    return LabeledDataset(features=features, targets=targets,
                          train_idx=train, val_idx=val, test_idx=test,
                          label_mapping=mapping)


def dataset_manifest(dataset: LabeledDataset, **extra) -> dict:
    """JSON-ready summary of a dataset's provenance and split sizes."""
    doc = {
        "num_rows": int(dataset.features.shape[0]),
        "num_features": int(dataset.num_features),
        "split_sizes": {
            "train": int(dataset.train_idx.size),
            "val": int(dataset.val_idx.size),
            "test": int(dataset.test_idx.size),
        },
        "label_mapping": dataset.label_mapping,
    }
    doc.update(extra)
    return doc


@dataclass(frozen=True)
class SyntheticSpec:
    teacher_seed: int
    input_dim: int
    num_classes: int
    train_size: int
    val_size: int
    test_size: int
    noise_rate: float = 0.0
    relatedness: str = "same_teacher"
    data_seed: int = 0
    task_id: str = "synthetic"

    def __post_init__(self):
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")
        if not (0.0 <= self.noise_rate <= 1.0):
            raise ValueError("noise rate must lie in [0, 1]")
        if self.relatedness not in RELATEDNESS_MODES:
            raise ValueError(f"unknown relatedness mode {self.relatedness!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")


def _teacher_params(teacher_seed: int, input_dim: int, num_classes: int,
                    independent: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fixed random teacher MLP (one tanh hidden layer of width 2*input_dim)."""
    tag = ("teacher", "independent") if independent else ("teacher",)
    rng = substream(teacher_seed, "init", *tag)
    hidden = 2 * input_dim
    w0 = rng.standard_normal((input_dim, hidden)) / math.sqrt(input_dim)
    b0 = rng.standard_normal(hidden) * 0.1
    w1 = rng.standard_normal((hidden, num_classes)) / math.sqrt(hidden)
    b1 = rng.standard_normal(num_classes) * 0.1
    return w0, b0, w1, b1


def teacher_logits(x: np.ndarray, teacher_seed: int, num_classes: int,
                   independent: bool = False) -> np.ndarray:
    w0, b0, w1, b1 = _teacher_params(teacher_seed, x.shape[1], num_classes, independent)
    return np.tanh(x @ w0 + b0) @ w1 + b1


def generate_synthetic_classification(spec: SyntheticSpec) -> Task:
    """Standard-normal inputs labeled by a fixed random teacher MLP.

    ``same_teacher`` reuses the canonical teacher for ``teacher_seed``;
    ``independent_teacher`` draws a fresh one from the same root seed;
    ``random_labels`` assigns uniform labels. Label noise flips each label
    to a uniformly drawn *other* class with probability ``noise_rate``.
    """
    m = spec.train_size + spec.val_size + spec.test_size
    x = substream(spec.data_seed, "data", "synthetic-inputs").standard_normal((m, spec.input_dim))
    if spec.relatedness == "random_labels":
        y = substream(spec.data_seed, "data", "random-labels").integers(0, spec.num_classes, size=m)
    else:
        logits = teacher_logits(x, spec.teacher_seed, spec.num_classes,
                                independent=(spec.relatedness == "independent_teacher"))
        y = np.argmax(logits, axis=1)
        if spec.noise_rate > 0.0:
            noise_rng = substream(spec.data_seed, "data", "label-noise")
            flip = noise_rng.random(m) < spec.noise_rate
            offsets = noise_rng.integers(1, spec.num_classes, size=m)
            y = np.where(flip, (y + offsets) % spec.num_classes, y)
    y = y.astype(np.int64)

    n_tr, n_va = spec.train_size, spec.val_size
    dataset = LabeledDataset(
        features=x, targets=y,
        train_idx=np.arange(0, n_tr),
        val_idx=np.arange(n_tr, n_tr + n_va),
        test_idx=np.arange(n_tr + n_va, m),
    )
    return Task(task_id=spec.task_id, objective="cross_entropy", dataset=dataset,
                head_spec=HeadSpec(output_dim=spec.num_classes, kind="classification"))


def derive_masked_reconstruction_task(dataset: LabeledDataset, mask_prob: float, seed: int,
                                      task_id: str = "tapt") -> Task:
    """Masked-feature reconstruction over the dataset's train rows.

    The model sees zero-filled masked entries plus an indicator channel
    (input width 2d) and is scored by masked_mse against the original
    features at masked positions; the head therefore reconstructs the full
    2d-wide model input space.
    """
    if not (0.0 < mask_prob < 1.0):
        raise ValueError("mask_prob must lie strictly between 0 and 1")
    pool = dataset.features[dataset.train_idx]
    d = pool.shape[1]
    recon_ds = LabeledDataset(
        features=pool,
        targets=np.zeros((pool.shape[0],), dtype=np.float64),
        train_idx=np.arange(pool.shape[0]),
        val_idx=np.empty(0, dtype=np.int64),
        test_idx=np.empty(0, dtype=np.int64),
    )
    return Task(task_id=task_id, objective="masked_mse", dataset=recon_ds,
                head_spec=HeadSpec(output_dim=2 * d, kind="reconstruction"),
                mask_prob=mask_prob, mask_seed=seed)


def derive_domain_task(pool: LabeledDataset, n: int, end_task_train_size: int,
                       mask_prob: float, seed: int, task_id: str = "dapt") -> Task:
    """Masked reconstruction on exactly n * |Train| rows subsampled from a domain pool."""
    want = n * end_task_train_size
    if pool.features.shape[0] < want:
        raise ValueError(f"pool has {pool.features.shape[0]} rows, need {want}")
    perm = substream(seed, "data", "domain-subsample").permutation(pool.features.shape[0])
    chosen = perm[:want]
    sub = LabeledDataset(
        features=pool.features[chosen],
        targets=np.zeros((want,), dtype=np.float64),
        train_idx=np.arange(want),
        val_idx=np.empty(0, dtype=np.int64),
        test_idx=np.empty(0, dtype=np.int64),
    )
    return derive_masked_reconstruction_task(sub, mask_prob, seed, task_id=task_id)
