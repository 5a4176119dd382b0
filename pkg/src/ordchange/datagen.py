"""Seeded synthetic longitudinal datasets with a geometric ordinal structure.

Every patient gets a random offset in feature space; every volume sits at

    latent = patient_offset + rank(class) * step_size * ordinal_direction

and its B-scans scatter around the latent with isotropic noise. Class
separability is therefore controlled by the step_size / noise_sigma ratio,
while patient offsets act as confounds that only patient-disjoint splits can
expose. Pair records walk a per-patient activity level between consecutive
visits and are labeled by the sign of the change; a configurable fraction is
corrupted (noise burst or sign flip) and relabeled as the catch-all class.

All generation is driven by a single seed and is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassLabel, BscanRecord, PairRecord
from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class GenConfig:
    """Shape and geometry of a generated dataset.

    class_ratios orders the three ordinal classes (reduced, stable,
    worsened); pair generation draws activity deltas with exactly these
    probabilities, so they set the label distribution in both tasks.
    ordinal_direction defaults to a random unit vector drawn from the seed.
    """

    n_patients: int = 60
    visits_per_patient: tuple[int, int] = (3, 5)
    bscans_per_volume: tuple[int, int] = (6, 10)
    feature_dim: int = 16
    class_ratios: tuple[float, float, float] = (0.10, 0.80, 0.10)
    step_size: float = 1.0
    noise_sigma: float = 0.5
    patient_sigma: float = 1.0
    other_rate: float = 0.10
    ordinal_direction: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")
        for name in ("visits_per_patient", "bscans_per_volume"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        ratios = tuple(float(r) for r in self.class_ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios):
            raise ConfigError(f"class_ratios must be three non-negative reals, got {self.class_ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"class_ratios must sum to 1, got sum {sum(ratios)!r}")
        object.__setattr__(self, "class_ratios", ratios)
        if not (self.step_size > 0):
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.patient_sigma < 0:
            raise ConfigError(f"patient_sigma must be >= 0, got {self.patient_sigma}")
        if not (0.0 <= self.other_rate <= 1.0):
            raise ConfigError(f"other_rate must lie in [0, 1], got {self.other_rate}")
        if self.ordinal_direction is not None:
            vec = np.asarray(self.ordinal_direction, dtype=np.float64)
            if vec.shape != (self.feature_dim,):
                raise ConfigError(
                    f"ordinal_direction must have length {self.feature_dim}, got shape {vec.shape}"
                )
            norm = float(np.linalg.norm(vec))
            if norm <= 0 or not np.isfinite(norm):
                raise ConfigError("ordinal_direction must have a positive finite norm")
            object.__setattr__(self, "ordinal_direction", tuple(vec / norm))


def _direction(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.ordinal_direction is not None:
        return np.asarray(cfg.ordinal_direction, dtype=np.float64)
    vec = rng.normal(size=cfg.feature_dim)
    norm = np.linalg.norm(vec)
    while norm == 0.0:  # vanishing draws are essentially impossible but cheap to guard
        vec = rng.normal(size=cfg.feature_dim)
        norm = np.linalg.norm(vec)
    return vec / norm


def gen_t2_volumes(cfg: GenConfig) -> list[BscanRecord]:
    """Generate labeled B-scan records for the 3-class single-scan task.

    Every volume draws its class from class_ratios; all B-scans of a volume
    share the volume's label and scatter around its latent with noise_sigma.
    """
    rng = np.random.default_rng(cfg.seed)
    direction = _direction(cfg, rng)
    records: list[BscanRecord] = []
    for p in range(cfg.n_patients):
        patient_id = f"P{p:03d}"
        offset = rng.normal(0.0, cfg.patient_sigma, size=cfg.feature_dim)
        n_visits = int(rng.integers(cfg.visits_per_patient[0], cfg.visits_per_patient[1] + 1))
        for v in range(n_visits):
            label = ClassLabel(int(rng.choice(3, p=cfg.class_ratios)))
            latent = offset + int(label) * cfg.step_size * direction
            volume_id = f"{patient_id}_V{v:02d}"
            n_bscans = int(rng.integers(cfg.bscans_per_volume[0], cfg.bscans_per_volume[1] + 1))
            for b in range(n_bscans):
                features = latent + rng.normal(0.0, cfg.noise_sigma, size=cfg.feature_dim)
                records.append(
                    BscanRecord(
                        patient_id=patient_id,
                        visit_id=f"V{v:02d}",
                        volume_id=volume_id,
                        bscan_index=b,
                        features=features,
                        label=label,
                    )
                )
    return records


def gen_t1_pairs(cfg: GenConfig) -> list[PairRecord]:
    """Generate visit pairs for the 4-class comparison task.

    A per-patient activity level takes steps in {-1, 0, +1} drawn with
    class_ratios between consecutive visits; the pair label is the sign of
    the step (Reduced / Stable / Worsened). With probability other_rate one
    member of the pair is corrupted (a heavy noise burst or a sign flip) and
    the pair is relabeled OTHER.
    """
    rng = np.random.default_rng(cfg.seed)
    direction = _direction(cfg, rng)
    sign_label = {-1: ClassLabel.REDUCED, 0: ClassLabel.STABLE, 1: ClassLabel.WORSENED}
    records: list[PairRecord] = []
    for p in range(cfg.n_patients):
        patient_id = f"P{p:03d}"
        offset = rng.normal(0.0, cfg.patient_sigma, size=cfg.feature_dim)
        n_visits = int(rng.integers(cfg.visits_per_patient[0], cfg.visits_per_patient[1] + 1))
        activity = int(rng.integers(0, 3))
        for _ in range(n_visits - 1):
            delta = int(rng.choice((-1, 0, 1), p=cfg.class_ratios))
            nxt = activity + delta
            feats_a = offset + activity * cfg.step_size * direction + rng.normal(
                0.0, cfg.noise_sigma, size=cfg.feature_dim
            )
            feats_b = offset + nxt * cfg.step_size * direction + rng.normal(
                0.0, cfg.noise_sigma, size=cfg.feature_dim
            )
            label = sign_label[delta]
            if cfg.other_rate > 0 and rng.random() < cfg.other_rate:
                corrupt_b = rng.random() < 0.5
                target = feats_b if corrupt_b else feats_a
                if rng.random() < 0.5:
                    target = target + rng.normal(
                        0.0, 10.0 * max(cfg.noise_sigma, cfg.step_size), size=cfg.feature_dim
                    )
                else:
                    target = -target
                if corrupt_b:
                    feats_b = target
                else:
                    feats_a = target
                label = ClassLabel.OTHER
            records.append(
                PairRecord(
                    patient_id=patient_id,
                    features_a=feats_a,
                    features_b=feats_b,
                    label=label,
                )
            )
            activity = nxt
    return records


def gen_pretext_pairs(
    features: np.ndarray, disease_labels: np.ndarray, n_pairs: int, seed: int = 0
) -> list[PairRecord]:
    """Sample record pairs labeled by whether the disease class changed.

    Labels are binary: 0 when both members share a disease class, 1 when the
    classes differ. With four balanced classes the expected change fraction
    is 12/16 = 0.75.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(disease_labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] != labs.shape[0]:
        raise InvalidInputError(
            f"features {feats.shape} and disease_labels {labs.shape} do not line up"
        )
    if feats.shape[0] < 2:
        raise InvalidInputError("pretext pairing needs at least two records")
    if n_pairs < 1:
        raise InvalidInputError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.default_rng(seed)
    left = rng.integers(0, feats.shape[0], size=n_pairs)
    right = rng.integers(0, feats.shape[0], size=n_pairs)
    return [
        PairRecord(
            patient_id=f"{i}:{j}",
            features_a=feats[i],
            features_b=feats[j],
            label=int(labs[i] != labs[j]),
        )
        for i, j in zip(left, right)
    ]


def gen_disease_features(
    n_per_class: int, n_classes: int = 4, feature_dim: int = 16, seed: int = 0, spread: float = 3.0
) -> tuple[np.ndarray, np.ndarray]:
    """Clustered stand-in features for disease classes, for pretext pairing."""
    if n_per_class < 1 or n_classes < 2 or feature_dim < 1:
        raise InvalidInputError("need n_per_class >= 1, n_classes >= 2, feature_dim >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(n_classes, feature_dim))
    feats = np.concatenate(
        [centers[c] + rng.normal(size=(n_per_class, feature_dim)) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return feats, labels
