"""Core domain types: change classes, tasks, probability vectors, confusion
matrices, and the record types carried through generation, training, and
evaluation.

Probability and logit vectors are plain float64 numpy arrays. The functions
``as_prob_vector`` and ``as_logits`` are the validation gates; everything
downstream assumes its inputs went through one of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

# Tolerance for the probability simplex checks. Tighter trips on ordinary
# accumulated float error, looser would hide real bugs.
PROB_TOL = 1e-9


class ClassLabel(IntEnum):
    """Change category.

    The first three classes are ordinal and their rank equals their numeric
    value (Reduced < Stable < Worsened along the severity axis). OTHER has no
    ordinal rank and only exists in task T1.
    """

    REDUCED = 0
    STABLE = 1
    WORSENED = 2
    OTHER = 3


ORDINAL_CLASSES: tuple[ClassLabel, ...] = (
    ClassLabel.REDUCED,
    ClassLabel.STABLE,
    ClassLabel.WORSENED,
)

CLASS_NAMES: tuple[str, ...] = ("reduced", "stable", "worsened", "other")


class Task(Enum):
    """The two classification tasks.

    T1 compares two visits of the same eye (4 classes, OTHER included),
    T2 forecasts change from a single visit (3 ordinal classes only).
    """

    T1 = "t1"
    T2 = "t2"

    @property
    def n_classes(self) -> int:
        return 4 if self is Task.T1 else 3

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.n_classes]

    def labels(self) -> tuple[ClassLabel, ...]:
        return tuple(ClassLabel(i) for i in range(self.n_classes))

    def validate_label(self, label: int | ClassLabel) -> ClassLabel:
        """Coerce to ClassLabel, rejecting values the task does not define."""
        try:
            lab = ClassLabel(int(label))
        except ValueError as exc:
            raise InvalidInputError(f"unknown class label {label!r}") from exc
        if int(lab) >= self.n_classes:
            raise InvalidInputError(
                f"label {lab.name} is not valid for task {self.value}"
            )
        return lab


def ordinal_rank(label: int | ClassLabel) -> int:
    """Rank of an ordinal class; OTHER has none and is rejected."""
    lab = ClassLabel(int(label))
    if lab is ClassLabel.OTHER:
        raise InvalidInputError("class OTHER has no ordinal rank")
    return int(lab)


def as_logits(z: Sequence[float] | np.ndarray) -> np.ndarray:
    """Validate a logit vector: 1-D, length >= 2, all entries finite."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise InvalidInputError(f"logits must be a 1-D vector of length >= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("logits contain non-finite entries")
    return arr


def as_prob_vector(p: Sequence[float] | np.ndarray, *, tol: float = PROB_TOL) -> np.ndarray:
    """Validate a probability vector: entries in [0, 1], summing to 1 within tol."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise InvalidInputError(f"probability vector must be 1-D of length >= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("probability vector contains non-finite entries")
    if np.any(arr < -tol) or np.any(arr > 1.0 + tol):
        raise InvalidInputError("probability entries must lie in [0, 1]")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise InvalidInputError(f"probabilities sum to {total!r}, expected 1 within {tol}")
    return arr


def softmax(z: np.ndarray) -> np.ndarray:
    """Stabilized softmax over the last axis.

    The running maximum is subtracted before exponentiation, so inputs with
    magnitudes up to about 1e4 neither overflow nor produce NaN. Rows of the
    output are valid probability vectors.
    """
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 1:
        as_logits(arr)
    elif arr.ndim == 2:
        if arr.shape[1] < 2 or not np.all(np.isfinite(arr)):
            raise InvalidInputError("logit rows must have length >= 2 and be finite")
    else:
        raise InvalidInputError(f"softmax expects a vector or matrix, got shape {arr.shape}")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cdf(p: Sequence[float] | np.ndarray) -> np.ndarray:
    """Cumulative distribution of a probability vector over class indices.

    Non-decreasing by construction; the final entry equals 1 up to float error.
    """
    arr = as_prob_vector(p)
    return np.cumsum(arr)


def confusion_from_predictions(
    truth: Iterable[int | ClassLabel],
    pred: Iterable[int | ClassLabel],
    n_classes: int,
) -> np.ndarray:
    """Build a confusion matrix with rows = true class, columns = predicted.

    Args:
        truth: true class values in [0, n_classes).
        pred: predicted class values, same length as truth.
        n_classes: number of classes C, at least 2.

    Returns:
        (C, C) int64 array; entry [t, p] counts samples with truth t predicted p.
    """
    if n_classes < 2:
        raise InvalidInputError("confusion matrix needs at least 2 classes")
    t = np.asarray([int(v) for v in truth], dtype=np.int64)
    p = np.asarray([int(v) for v in pred], dtype=np.int64)
    if t.shape != p.shape:
        raise InvalidInputError(f"truth and prediction lengths differ: {t.shape[0]} vs {p.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise InvalidInputError("truth labels outside [0, n_classes)")
    if p.size and (p.min() < 0 or p.max() >= n_classes):
        raise InvalidInputError("predicted labels outside [0, n_classes)")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _frozen_features(arr: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if out.ndim != 1 or out.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-D vector, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BscanRecord:
    """One B-scan of a retinal volume with its change label.

    All records sharing a volume_id are expected to share the same label;
    ``validate_bscan_dataset`` enforces that at dataset boundaries.
    """

    patient_id: str
    visit_id: str
    volume_id: str
    bscan_index: int
    features: np.ndarray
    label: ClassLabel

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _frozen_features(self.features, "features"))
        if self.bscan_index < 0:
            raise InvalidInputError(f"bscan_index must be >= 0, got {self.bscan_index}")
        object.__setattr__(self, "label", ClassLabel(int(self.label)))

    @property
    def key(self) -> str:
        return f"{self.volume_id}/{self.bscan_index}"


@dataclass(frozen=True)
class PairRecord:
    """A pair of feature vectors from two visits of one patient.

    The label is a 4-class ClassLabel for the pair-comparison task, or a
    binary 0/1 change flag when the record comes from pretext pairing.
    """

    patient_id: str
    features_a: np.ndarray
    features_b: np.ndarray
    label: ClassLabel | int

    def __post_init__(self) -> None:
        object.__setattr__(self, "features_a", _frozen_features(self.features_a, "features_a"))
        object.__setattr__(self, "features_b", _frozen_features(self.features_b, "features_b"))
        if self.features_a.shape != self.features_b.shape:
            raise InvalidInputError(
                f"paired feature dims differ: {self.features_a.shape} vs {self.features_b.shape}"
            )
        if int(self.label) < 0:
            raise InvalidInputError(f"label must be >= 0, got {self.label}")


def validate_bscan_dataset(records: Sequence[BscanRecord]) -> None:
    """Check (volume_id, bscan_index) uniqueness and per-volume label agreement."""
    seen: dict[tuple[str, int], None] = {}
    volume_label: dict[str, ClassLabel] = {}
    for rec in records:
        k = (rec.volume_id, rec.bscan_index)
        if k in seen:
            raise InvalidInputError(f"duplicate record key {rec.volume_id}/{rec.bscan_index}")
        seen[k] = None
        prev = volume_label.setdefault(rec.volume_id, rec.label)
        if prev != rec.label:
            raise InvalidInputError(
                f"volume {rec.volume_id} carries conflicting labels {prev.name} and {rec.label.name}"
            )
