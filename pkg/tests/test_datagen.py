import numpy as np
import pytest

from ordchange.core import ClassLabel, validate_bscan_dataset
from ordchange.datagen import GenConfig, gen_pretext_pairs, gen_t1_pairs, gen_t2_volumes
from ordchange.errors import ConfigError, InvalidInputError


def axis_direction(dim: int) -> tuple[float, ...]:
    vec = [0.0] * dim
    vec[0] = 1.0
    return tuple(vec)


class TestGenConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_patients": 0},
            {"visits_per_patient": (0, 3)},
            {"visits_per_patient": (4, 2)},
            {"bscans_per_volume": (5, 1)},
            {"feature_dim": 0},
            {"class_ratios": (0.5, 0.5)},
            {"class_ratios": (0.5, 0.3, 0.1)},
            {"class_ratios": (0.6, 0.5, -0.1)},
            {"step_size": 0.0},
            {"noise_sigma": -1.0},
            {"patient_sigma": -0.5},
            {"other_rate": 1.5},
            {"ordinal_direction": (1.0, 0.0)},
            {"ordinal_direction": tuple([0.0] * 16)},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            GenConfig(**kwargs)

    def test_direction_is_normalized(self):
        cfg = GenConfig(feature_dim=2, ordinal_direction=(3.0, 4.0))
        np.testing.assert_allclose(cfg.ordinal_direction, (0.6, 0.8))


class TestT2Volumes:
    def test_determinism(self):
        a = gen_t2_volumes(GenConfig(n_patients=8, seed=3))
        b = gen_t2_volumes(GenConfig(n_patients=8, seed=3))
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra.key == rb.key and ra.label == rb.label
            assert ra.features.tobytes() == rb.features.tobytes()
        c = gen_t2_volumes(GenConfig(n_patients=8, seed=4))
        assert any(x.features.tobytes() != y.features.tobytes() for x, y in zip(a, c))

    def test_volume_labels_consistent(self):
        records = gen_t2_volumes(GenConfig(n_patients=20, seed=1))
        validate_bscan_dataset(records)  # no duplicate keys, no conflicting labels

    def test_counts_respect_ranges(self):
        cfg = GenConfig(n_patients=15, visits_per_patient=(2, 4), bscans_per_volume=(3, 6), seed=2)
        records = gen_t2_volumes(cfg)
        by_volume: dict[str, int] = {}
        by_patient: dict[str, set] = {}
        for r in records:
            by_volume[r.volume_id] = by_volume.get(r.volume_id, 0) + 1
            by_patient.setdefault(r.patient_id, set()).add(r.volume_id)
        assert len(by_patient) == 15
        assert all(2 <= len(v) <= 4 for v in by_patient.values())
        assert all(3 <= n <= 6 for n in by_volume.values())

    def test_class_ratios_hold_at_scale(self):
        cfg = GenConfig(n_patients=600, class_ratios=(0.1, 0.8, 0.1), seed=5)
        records = gen_t2_volumes(cfg)
        volume_labels = {r.volume_id: int(r.label) for r in records}
        counts = np.bincount(list(volume_labels.values()), minlength=3)
        fractions = counts / counts.sum()
        np.testing.assert_allclose(fractions, (0.1, 0.8, 0.1), atol=0.02)

    def test_separability_tracks_step_to_noise_ratio(self):
        def projection_accuracy(step, noise):
            cfg = GenConfig(
                n_patients=40, feature_dim=4, step_size=step, noise_sigma=noise,
                patient_sigma=0.0, class_ratios=(1 / 3, 1 / 3, 1 / 3),
                ordinal_direction=axis_direction(4), seed=11,
            )
            records = gen_t2_volumes(cfg)
            proj = np.array([r.features[0] for r in records])
            labels = np.array([int(r.label) for r in records])
            centers = np.array([0.0, step, 2.0 * step])
            pred = np.argmin(np.abs(proj[:, None] - centers[None, :]), axis=1)
            return float(np.mean(pred == labels))

        assert projection_accuracy(3.0, 0.1) > 0.95
        assert projection_accuracy(0.1, 3.0) < 0.6

    def test_patient_offsets_confound_features(self):
        def patient_spread(sigma):
            cfg = GenConfig(n_patients=30, noise_sigma=0.1, patient_sigma=sigma, seed=7)
            records = gen_t2_volumes(cfg)
            means = {}
            for r in records:
                means.setdefault(r.patient_id, []).append(r.features)
            centers = np.array([np.mean(v, axis=0) for v in means.values()])
            return float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).mean())

        assert patient_spread(5.0) > 3.0 * patient_spread(0.0)


class TestT1Pairs:
    def test_determinism(self):
        a = gen_t1_pairs(GenConfig(n_patients=10, seed=3))
        b = gen_t1_pairs(GenConfig(n_patients=10, seed=3))
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra.label == rb.label
            assert ra.features_a.tobytes() == rb.features_a.tobytes()
            assert ra.features_b.tobytes() == rb.features_b.tobytes()

    def test_pair_count_is_visits_minus_one(self):
        cfg = GenConfig(n_patients=25, visits_per_patient=(4, 4), seed=9)
        assert len(gen_t1_pairs(cfg)) == 25 * 3

    def test_label_matches_projection_delta(self):
        cfg = GenConfig(
            n_patients=50, feature_dim=3, step_size=1.0, noise_sigma=0.01,
            patient_sigma=0.0, other_rate=0.0, ordinal_direction=axis_direction(3),
            class_ratios=(0.3, 0.4, 0.3), seed=13,
        )
        for rec in gen_t1_pairs(cfg):
            delta = rec.features_b[0] - rec.features_a[0]
            if rec.label is ClassLabel.REDUCED:
                assert delta < -0.5
            elif rec.label is ClassLabel.STABLE:
                assert abs(delta) < 0.5
            else:
                assert rec.label is ClassLabel.WORSENED and delta > 0.5

    def test_other_rate_sets_other_fraction(self):
        cfg = GenConfig(n_patients=800, visits_per_patient=(4, 4), other_rate=0.10, seed=17)
        records = gen_t1_pairs(cfg)
        fraction = np.mean([r.label is ClassLabel.OTHER for r in records])
        assert abs(fraction - 0.10) < 0.02

    def test_other_rate_zero_never_emits_other(self):
        records = gen_t1_pairs(GenConfig(n_patients=100, other_rate=0.0, seed=19))
        assert all(r.label is not ClassLabel.OTHER for r in records)

    def test_step_labels_follow_class_ratios(self):
        cfg = GenConfig(
            n_patients=1500, visits_per_patient=(3, 3), other_rate=0.0,
            class_ratios=(0.2, 0.6, 0.2), seed=23,
        )
        records = gen_t1_pairs(cfg)
        counts = np.bincount([int(r.label) for r in records], minlength=3)
        np.testing.assert_allclose(counts / counts.sum(), (0.2, 0.6, 0.2), atol=0.02)


class TestPretextPairs:
    def test_change_rate_for_balanced_classes(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(1000, 4))
        labels = np.arange(1000) % 4
        pairs = gen_pretext_pairs(feats, labels, n_pairs=20000, seed=1)
        assert len(pairs) == 20000
        rate = np.mean([int(p.label) for p in pairs])
        assert abs(rate - 0.75) < 0.02

    def test_labels_are_binary_change_flags(self):
        feats = np.array([[0.0], [1.0], [2.0]])
        labels = np.array([0, 0, 1])
        for p in gen_pretext_pairs(feats, labels, n_pairs=200, seed=2):
            i, j = (int(s) for s in p.patient_id.split(":"))
            assert int(p.label) == int(labels[i] != labels[j])
            np.testing.assert_array_equal(p.features_a, feats[i])
            np.testing.assert_array_equal(p.features_b, feats[j])

    def test_determinism(self):
        feats = np.random.default_rng(3).normal(size=(50, 2))
        labels = np.zeros(50, dtype=int)
        a = gen_pretext_pairs(feats, labels, n_pairs=64, seed=4)
        b = gen_pretext_pairs(feats, labels, n_pairs=64, seed=4)
        assert [p.patient_id for p in a] == [p.patient_id for p in b]

    def test_input_validation(self):
        feats = np.zeros((4, 2))
        with pytest.raises(InvalidInputError):
            gen_pretext_pairs(feats, np.zeros(3), n_pairs=4)
        with pytest.raises(InvalidInputError):
            gen_pretext_pairs(feats[:1], np.zeros(1), n_pairs=4)
        with pytest.raises(InvalidInputError):
            gen_pretext_pairs(feats, np.zeros(4), n_pairs=0)
