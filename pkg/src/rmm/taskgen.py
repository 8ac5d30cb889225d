"""Datasets and (pseudo) class-incremental task construction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from rmm.env import CilTaskSpec
from rmm.memory import round_half_up

MIN_SAMPLES_PER_CLASS = 10


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DatasetSource:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise ValueError("features, labels and sample_ids disagree in length")
        if n == 0:
            raise ValueError("no classes")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if len(np.unique(self.sample_ids)) != n:
            raise ValueError("duplicate sample ids")
        small = [int(c) for c, k in zip(*np.unique(self.labels, return_counts=True))
                 if k < MIN_SAMPLES_PER_CLASS]
        if small:
            raise ValueError(f"classes {small} have fewer than {MIN_SAMPLES_PER_CLASS} samples")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def __eq__(self, other):
        return (isinstance(other, DatasetSource)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.sample_ids, other.sample_ids))


def make_synthetic_dataset(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    rng: np.random.Generator,
) -> DatasetSource:
    """Unit-variance Gaussian blobs with means spread on a sphere of radius ``separation``."""
    if num_classes <= 0 or dim <= 0 or samples_per_class <= 0:
        raise ValueError("class count, dimension and samples per class must be positive")
    if not separation > 0:
        raise ValueError(f"separation must be positive, got {separation}")
    directions = rng.normal(size=(num_classes, dim))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    features = np.concatenate(
        [m + rng.normal(size=(samples_per_class, dim)) for m in means])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return DatasetSource(features, labels, np.arange(len(labels)))


def save_dataset(source: DatasetSource, path, comments: Sequence[str] = ()) -> None:
    lines = ["# rmm dataset: header dim,classes; rows class_id,sample_id,features"]
    lines += [f"# {c}" for c in comments]
    lines.append(f"{source.dim},{len(source.class_ids)}")
    for c, s, x in zip(source.labels, source.sample_ids, source.features):
        lines.append(",".join([str(int(c)), str(int(s))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> DatasetSource:
    text = Path(path).read_text(encoding="utf-8")
    header = None
    labels, ids, rows = [], [], []
    seen_ids: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if header is None:
            try:
                dim, num_classes = (int(p) for p in parts)
            except ValueError:
                raise DatasetFormatError("header must be 'dim,classes'", lineno) from None
            if dim <= 0 or num_classes <= 0:
                raise DatasetFormatError("header values must be positive", lineno)
            header = (dim, num_classes)
            continue
        if len(parts) != header[0] + 2:
            raise DatasetFormatError(
                f"expected {header[0]} feature values, got {len(parts) - 2}", lineno)
        try:
            c, s = int(parts[0]), int(parts[1])
            x = [float(p) for p in parts[2:]]
        except ValueError:
            raise DatasetFormatError("malformed row", lineno) from None
        if not all(math.isfinite(v) for v in x):
            raise DatasetFormatError("non-finite feature value", lineno)
        if s in seen_ids:
            raise DatasetFormatError(f"duplicate sample_id {s} (first on line {seen_ids[s]})", lineno)
        seen_ids[s] = lineno
        labels.append(c)
        ids.append(s)
        rows.append(x)
    if header is None or not rows:
        raise DatasetFormatError("no classes")
    found = len(set(labels))
    if found != header[1]:
        raise DatasetFormatError(f"header declares {header[1]} classes, found {found}")
    return DatasetSource(np.array(rows), np.array(labels), np.array(ids))


def _split_rows(source: DatasetSource, classes, val_fraction: Fraction, rng):
    train, val = {}, {}
    for c in classes:
        rows = np.flatnonzero(source.labels == c)
        n_val = max(1, math.ceil(len(rows) * val_fraction))
        if n_val >= len(rows):
            raise ValueError(f"class {c} has too few samples for a validation split")
        held = np.sort(rng.choice(rows, size=n_val, replace=False))
        val[c] = held
        train[c] = np.setdiff1d(rows, held)
    return train, val


def make_cil_task(
    source: DatasetSource,
    phase_class_counts: Sequence[int],
    total_budget: int,
    rng: np.random.Generator,
    val_fraction=Fraction(1, 10),
    shuffle: bool = True,
    name: str = "",
) -> CilTaskSpec:
    """A class-incremental task over the first ``sum(phase_class_counts)`` classes.

    With ``shuffle`` the class order is a uniform permutation; per class a
    ``val_fraction`` share (rounded up, at least one) is held out.
    """
    counts = [int(c) for c in phase_class_counts]
    if len(counts) < 2 or any(c < 1 for c in counts):
        raise ValueError("need an initial phase and at least one incremental phase, all non-empty")
    order = source.class_ids
    if sum(counts) > len(order):
        raise ValueError(f"task needs {sum(counts)} classes, source has {len(order)}")
    if shuffle:
        order = [order[j] for j in rng.permutation(len(order))]
    used = order[:sum(counts)]
    phases, start = [], 0
    for c in counts:
        phases.append(tuple(used[start:start + c]))
        start += c
    train, val = _split_rows(source, used, Fraction(val_fraction), rng)
    return CilTaskSpec(source.features, source.labels, source.sample_ids, tuple(phases),
                       train, val, int(total_budget), name)


def halved_counts(phase_class_counts: Sequence[int]) -> list[int]:
    return [max(1, c // 2) for c in phase_class_counts]


def make_pseudo_task(
    source: DatasetSource,
    target_phase_counts: Sequence[int],
    total_budget: int,
    rng: np.random.Generator,
) -> CilTaskSpec:
    """Downsized copy of a target task built from accessible data only.

    Per-phase class counts are halved, classes are drawn in a fresh random
    order, and the memory budget shrinks with the per-phase data volume.
    """
    target = list(target_phase_counts)
    pseudo = halved_counts(target)
    if len(source.class_ids) < sum(pseudo):
        raise ValueError(
            f"source has {len(source.class_ids)} classes, pseudo task needs {sum(pseudo)}")
    budget = round_half_up(Fraction(total_budget * sum(pseudo[1:]), sum(target[1:])))
    return make_cil_task(source, pseudo, budget, rng, Fraction(1, 10), True, "pseudo")


def phase0_source(task: CilTaskSpec) -> DatasetSource:
    """The training pool of the initial phase, the data legally reusable for pseudo tasks."""
    rows = np.concatenate([task.train_rows[c] for c in task.phase_classes[0]])
    return DatasetSource(task.features[rows], task.labels[rows], task.sample_ids[rows])


BENCHMARK_PHASES = (10, 2, 2, 2, 2, 2)
BENCHMARK_BUDGET = 400
DEFAULT_OLD_FRACTION = Fraction(1, 4)


def benchmark_dataset(seed: int = 0, separation: float = 3.0) -> DatasetSource:
    """20 Gaussian classes in 16 dimensions with 200 samples each."""
    return make_synthetic_dataset(20, 16, 200, separation, np.random.default_rng(seed))


def benchmark_task(source: DatasetSource | None = None, split_seed: int = 1) -> CilTaskSpec:
    """The desk-scale target: 10 initial classes, then 5 phases of 2.

    A quarter of each class is held out for testing. The budget of 400 gives
    the default fixed split (a quarter kept as exemplars) 10 exemplars per old
    class at the first incremental phase.
    """
    source = source if source is not None else benchmark_dataset()
    return make_cil_task(source, BENCHMARK_PHASES, BENCHMARK_BUDGET,
                         np.random.default_rng(split_seed), Fraction(1, 4), False, "benchmark")
