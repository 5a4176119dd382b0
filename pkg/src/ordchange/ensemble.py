"""Combining predictions across models and enforcing volume-level agreement.

Three rules live here:

  * ``mean_ensemble``: average class probabilities across models, argmax.
  * ``stable_unanimity_vote``: a record is Stable only when every model says
    Stable; otherwise the majority among the non-Stable predictions wins.
  * ``volume_consistency``: a volume becomes Stable when at least the
    configured fraction of its B-scan predictions are Stable, otherwise the
    majority among its non-Stable predictions; the volume label is then
    broadcast to every B-scan.

Ties everywhere break by the configured rule, mean probability by default,
and then by the lower class index. The non-Stable-majority reading keeps the
two rules from collapsing into plain majority voting; the conventional
all-predictions majority is available via ``majority_includes_stable``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .core import ClassLabel, as_prob_vector
from .errors import AlignmentError, ConfigError, InvalidInputError


class TieBreak(Enum):
    MEAN_PROBABILITY = "mean_probability"
    MOST_SEVERE = "most_severe"


@dataclass(frozen=True)
class PostprocessConfig:
    """Knobs for the voting and volume-consistency rules."""

    stable_class: int = int(ClassLabel.STABLE)
    stable_ratio_threshold: float = 0.8
    tie_break: TieBreak = TieBreak.MEAN_PROBABILITY
    majority_includes_stable: bool = False

    def __post_init__(self) -> None:
        if self.stable_class < 0:
            raise ConfigError(f"stable_class must be >= 0, got {self.stable_class}")
        if not (0.0 < self.stable_ratio_threshold <= 1.0):
            raise ConfigError(
                f"stable_ratio_threshold must lie in (0, 1], got {self.stable_ratio_threshold}"
            )
        if not isinstance(self.tie_break, TieBreak):
            raise ConfigError(f"tie_break must be a TieBreak, got {self.tie_break!r}")


@dataclass(frozen=True)
class PredictionSet:
    """One model's probabilities, keyed by record."""

    model_id: str
    entries: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self) -> None:
        checked = []
        seen = set()
        width = None
        for key, probs in self.entries:
            if key in seen:
                raise InvalidInputError(f"prediction set {self.model_id} repeats key {key!r}")
            seen.add(key)
            vec = as_prob_vector(probs)
            if width is None:
                width = vec.shape[0]
            elif vec.shape[0] != width:
                raise InvalidInputError(
                    f"prediction set {self.model_id} mixes {width}- and {vec.shape[0]}-class rows"
                )
            checked.append((key, vec))
        object.__setattr__(self, "entries", tuple(checked))

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.entries)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.entries)


class BscanPrediction(NamedTuple):
    """A per-B-scan label with its volume membership and probabilities."""

    key: str
    volume_id: str
    label: int
    probs: np.ndarray


def _check_aligned(sets: Sequence[PredictionSet]) -> None:
    if not sets:
        raise InvalidInputError("need at least one prediction set")
    base = set(sets[0].keys)
    width = sets[0].entries[0][1].shape[0] if sets[0].entries else None
    for ps in sets[1:]:
        other = set(ps.keys)
        if other != base:
            missing = sorted(base ^ other)[:10]
            raise AlignmentError(
                f"prediction sets {sets[0].model_id!r} and {ps.model_id!r} disagree on keys; "
                f"first offenders: {missing}"
            )
        if ps.entries and ps.entries[0][1].shape[0] != width:
            raise InvalidInputError("prediction sets disagree on the number of classes")


def _argmax_lowest(probs: np.ndarray) -> int:
    # np.argmax already returns the first maximum, i.e. the lower class index.
    return int(np.argmax(probs))


def mean_ensemble(sets: Sequence[PredictionSet]) -> list[tuple[str, int, np.ndarray]]:
    """Average probabilities across models and take the argmax per record.

    Record order follows the first set. All sets must cover identical keys.
    Ties at the argmax resolve to the lower class index.
    """
    _check_aligned(sets)
    lookups = [ps.as_dict() for ps in sets[1:]]
    out = []
    for key, probs in sets[0].entries:
        stack = [probs] + [lk[key] for lk in lookups]
        mean = np.mean(stack, axis=0)
        out.append((key, _argmax_lowest(mean), mean))
    return out


def _majority(
    labels: Sequence[int], probs: Sequence[np.ndarray], cfg: PostprocessConfig
) -> int:
    """Majority vote with the configured tie-breaking, assuming labels non-empty."""
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0]
    if cfg.tie_break is TieBreak.MOST_SEVERE:
        return tied[-1]
    mean = np.mean(np.stack(probs), axis=0)
    best = max(tied, key=lambda c: (mean[c], -c))
    return best


def stable_unanimity_vote(
    preds: Sequence[tuple[int, np.ndarray]], cfg: PostprocessConfig | None = None
) -> int:
    """Combine one record's predictions from several models.

    Stable wins only when every model predicts Stable. Otherwise the majority
    among the non-Stable predictions decides (or among all predictions when
    ``majority_includes_stable`` is set).
    """
    cfg = cfg or PostprocessConfig()
    if not preds:
        raise InvalidInputError("unanimity vote needs at least one prediction")
    labels = [int(lab) for lab, _ in preds]
    probs = [as_prob_vector(p) for _, p in preds]
    if all(lab == cfg.stable_class for lab in labels):
        return cfg.stable_class
    if cfg.majority_includes_stable:
        return _majority(labels, probs, cfg)
    keep = [i for i, lab in enumerate(labels) if lab != cfg.stable_class]
    return _majority([labels[i] for i in keep], [probs[i] for i in keep], cfg)


def unanimity_ensemble(
    sets: Sequence[PredictionSet], cfg: PostprocessConfig | None = None
) -> list[tuple[str, int, np.ndarray]]:
    """Apply the unanimity vote per record across aligned prediction sets.

    The reported probabilities are the across-model means, which downstream
    volume tie-breaking uses.
    """
    cfg = cfg or PostprocessConfig()
    _check_aligned(sets)
    lookups = [ps.as_dict() for ps in sets[1:]]
    out = []
    for key, probs in sets[0].entries:
        stack = [probs] + [lk[key] for lk in lookups]
        votes = [(_argmax_lowest(p), p) for p in stack]
        label = stable_unanimity_vote(votes, cfg)
        out.append((key, label, np.mean(stack, axis=0)))
    return out


def volume_consistency(
    preds: Sequence[BscanPrediction], cfg: PostprocessConfig | None = None
) -> tuple[dict[str, int], list[BscanPrediction]]:
    """Force one label per volume and broadcast it to the B-scans.

    A volume is Stable when the fraction of its B-scans predicted Stable is
    at least ``stable_ratio_threshold`` (inclusive); otherwise the majority
    among its non-Stable B-scan predictions wins, ties per the config.

    Returns:
        A volume_id -> label map and the input predictions relabeled, in the
        original order.
    """
    cfg = cfg or PostprocessConfig()
    if not preds:
        raise InvalidInputError("volume consistency needs at least one prediction")
    by_volume: dict[str, list[BscanPrediction]] = {}
    for p in preds:
        if not p.volume_id:
            raise InvalidInputError(f"record {p.key!r} carries no volume_id")
        by_volume.setdefault(p.volume_id, []).append(p)

    volume_labels: dict[str, int] = {}
    for vol, group in by_volume.items():
        labels = [int(g.label) for g in group]
        probs = [as_prob_vector(g.probs) for g in group]
        stable_fraction = sum(1 for lab in labels if lab == cfg.stable_class) / len(labels)
        if stable_fraction >= cfg.stable_ratio_threshold:
            volume_labels[vol] = cfg.stable_class
        elif cfg.majority_includes_stable:
            volume_labels[vol] = _majority(labels, probs, cfg)
        else:
            keep = [i for i, lab in enumerate(labels) if lab != cfg.stable_class]
            volume_labels[vol] = _majority([labels[i] for i in keep], [probs[i] for i in keep], cfg)

    relabeled = [p._replace(label=volume_labels[p.volume_id]) for p in preds]
    return volume_labels, relabeled
