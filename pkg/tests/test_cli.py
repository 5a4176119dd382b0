import json
from pathlib import Path

import numpy as np
import pytest

import ordchange.cli as cli
from ordchange.cli import (
    GEN_SCHEMA,
    TRAIN_SCHEMA,
    PredRow,
    main,
    parse_kv_config,
    read_predictions_csv,
    read_truth_csv,
    write_predictions_csv,
)
from ordchange.core import Task
from ordchange.errors import ConfigError

GEN_CFG = """\
# tiny but non-trivial dataset
task=t2
n_patients=8
visits_min=2
visits_max=2
bscans_min=3
bscans_max=3
feature_dim=5
class_ratios=0.25,0.5,0.25
step_size=2.0
noise_sigma=0.3
patient_sigma=0.5
seed=11
"""

TRAIN_CFG = """\
task=t2
loss=combined
encoder_dims=5,8
head_dims=8,3
epochs=3
lr=0.01
batch_size=16
seed=1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    """One gen -> train -> predict pipeline shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.cfg").write_text(GEN_CFG)
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["gen", "--config", str(root / "gen.cfg"), "--out", str(root / "data")]) == 0
    assert (
        main(
            [
                "train",
                "--config", str(root / "train.cfg"),
                "--data", str(root / "data" / "dataset.csv"),
                "--out", str(root / "model.ckpt"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "predict",
                "--ckpt", str(root / "model.ckpt"),
                "--data", str(root / "data" / "dataset.csv"),
                "--out", str(root / "preds.csv"),
            ]
        )
        == 0
    )
    return root


class TestParseConfig:
    def test_comments_blanks_and_types(self):
        text = "# header\n\nn_patients = 5\nclass_ratios=0.1,0.8,0.1\n"
        values = parse_kv_config(text, GEN_SCHEMA, "x.cfg")
        assert values == {"n_patients": 5, "class_ratios": (0.1, 0.8, 0.1)}
        assert parse_kv_config("balanced_batches=true\n", TRAIN_SCHEMA, "y")["balanced_batches"] is True

    def test_unknown_key_names_source_and_line(self):
        with pytest.raises(ConfigError, match=r"cfg\.txt:3: unknown config key 'bogus'"):
            parse_kv_config("# c\nseed=1\nbogus=2\n", GEN_SCHEMA, "cfg.txt")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match=r"cfg:2: duplicate config key 'seed'"):
            parse_kv_config("seed=1\nseed=2\n", GEN_SCHEMA, "cfg")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match=r"cfg:1: bad value for 'n_patients'"):
            parse_kv_config("n_patients=lots\n", GEN_SCHEMA, "cfg")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=r"cfg:1: expected key=value"):
            parse_kv_config("just words\n", GEN_SCHEMA, "cfg")


class TestGen:
    def test_outputs_and_summary(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(GEN_CFG)
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        out = capsys.readouterr().out
        assert "records" in out and "stable=" in out
        for name in ("dataset.csv", "truth.csv", "manifest.json"):
            assert (tmp_path / "d" / name).exists()
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 11
        assert manifest["duration_seconds"] >= 0
        assert str(tmp_path / "d" / "dataset.csv") in manifest["outputs"]

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(GEN_CFG)
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()
        assert (tmp_path / "a" / "truth.csv").read_bytes() == (tmp_path / "b" / "truth.csv").read_bytes()

    def test_seed_override_changes_data(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(GEN_CFG)
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["gen", "--config", str(cfg), "--seed", "99", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()

    def test_bad_ratios_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("task=t2\nclass_ratios=0.5,0.4,0.2\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 3
        assert "class_ratios" in capsys.readouterr().err

    def test_unknown_key_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("task=t2\nn_patient=5\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 3
        assert ":2:" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_artifacts_exist(self, workdir):
        assert (workdir / "model.ckpt").exists()
        assert (workdir / "model.ckpt.history.csv").exists()
        manifest = json.loads((workdir / "model.ckpt.manifest.json").read_text())
        assert manifest["command"] == "train"
        assert str(workdir / "model.ckpt") in manifest["outputs"]

    def test_history_has_one_row_per_epoch(self, workdir):
        lines = (workdir / "model.ckpt.history.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,train_loss,lr,micro_f1,")
        assert len(lines) == 1 + 3

    def test_rerun_is_byte_identical(self, workdir, tmp_path, capsys):
        assert (
            main(
                [
                    "train",
                    "--config", str(workdir / "train.cfg"),
                    "--data", str(workdir / "data" / "dataset.csv"),
                    "--out", str(tmp_path / "again.ckpt"),
                ]
            )
            == 0
        )
        assert "fold 0: best val average" in capsys.readouterr().out
        assert (tmp_path / "again.ckpt").read_bytes() == (workdir / "model.ckpt").read_bytes()
        assert (
            (tmp_path / "again.ckpt.history.csv").read_bytes()
            == (workdir / "model.ckpt.history.csv").read_bytes()
        )

    def test_loss_override_changes_model(self, workdir, tmp_path):
        assert (
            main(
                [
                    "train",
                    "--config", str(workdir / "train.cfg"),
                    "--data", str(workdir / "data" / "dataset.csv"),
                    "--loss", "ce",
                    "--out", str(tmp_path / "ce.ckpt"),
                ]
            )
            == 0
        )
        assert (tmp_path / "ce.ckpt").read_bytes() != (workdir / "model.ckpt").read_bytes()

    def test_three_folds_write_three_checkpoints(self, workdir, tmp_path, capsys):
        assert (
            main(
                [
                    "train",
                    "--config", str(workdir / "train.cfg"),
                    "--data", str(workdir / "data" / "dataset.csv"),
                    "--folds", "3",
                    "--out", str(tmp_path / "cv.ckpt"),
                ]
            )
            == 0
        )
        out = capsys.readouterr().out
        for i in range(3):
            assert (tmp_path / f"cv.fold{i}.ckpt").exists()
            assert (tmp_path / f"cv.fold{i}.ckpt.history.csv").exists()
            assert f"fold {i}: best val average" in out
        assert not (tmp_path / "cv.ckpt").exists()

    def test_fold_parallelism_matches_serial(self, workdir, tmp_path, monkeypatch):
        args = [
            "train",
            "--config", str(workdir / "train.cfg"),
            "--data", str(workdir / "data" / "dataset.csv"),
            "--folds", "2",
        ]
        assert main(args + ["--out", str(tmp_path / "serial.ckpt")]) == 0
        monkeypatch.setenv("ORDCHANGE_THREADS", "2")
        assert main(args + ["--out", str(tmp_path / "par.ckpt")]) == 0
        for i in range(2):
            assert (
                (tmp_path / f"serial.fold{i}.ckpt").read_bytes()
                == (tmp_path / f"par.fold{i}.ckpt").read_bytes()
            )

    def test_emd_on_t1_exit_3(self, tmp_path, capsys):
        gen_cfg = tmp_path / "gen.cfg"
        gen_cfg.write_text("task=t1\nn_patients=6\nfeature_dim=4\nseed=0\n")
        assert main(["gen", "--config", str(gen_cfg), "--out", str(tmp_path / "d")]) == 0
        rc = main(
            [
                "train",
                "--data", str(tmp_path / "d" / "dataset.csv"),
                "--task", "t1",
                "--loss", "emd",
                "--out", str(tmp_path / "m.ckpt"),
            ]
        )
        assert rc == 3
        assert "t1" in capsys.readouterr().err

    def test_task_mismatch_exit_3(self, workdir, tmp_path):
        rc = main(
            [
                "train",
                "--data", str(workdir / "data" / "dataset.csv"),
                "--task", "t1",
                "--out", str(tmp_path / "m.ckpt"),
            ]
        )
        assert rc == 3

    def test_missing_data_exit_2(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.ckpt")]) == 2

    def test_bad_thread_env_exit_3(self, workdir, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ORDCHANGE_THREADS", "many")
        rc = main(
            [
                "train",
                "--config", str(workdir / "train.cfg"),
                "--data", str(workdir / "data" / "dataset.csv"),
                "--out", str(tmp_path / "m.ckpt"),
            ]
        )
        assert rc == 3
        assert "ORDCHANGE_THREADS" in capsys.readouterr().err


class TestPredict:
    def test_probabilities_serialize_to_simplex(self, workdir):
        lines = (workdir / "preds.csv").read_text().splitlines()
        assert lines[0] == "case_id,patient_id,volume_id,bscan_index,true_label,p_reduced,p_stable,p_worsened,pred_label"
        for line in lines[1:]:
            parts = line.split(",")
            probs = [float(v) for v in parts[5:8]]
            assert abs(sum(probs) - 1.0) < 1e-6
            assert int(parts[8]) == int(np.argmax(probs))

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        assert (
            main(
                [
                    "predict",
                    "--ckpt", str(workdir / "model.ckpt"),
                    "--data", str(workdir / "data" / "dataset.csv"),
                    "--out", str(tmp_path / "again.csv"),
                ]
            )
            == 0
        )
        assert (tmp_path / "again.csv").read_bytes() == (workdir / "preds.csv").read_bytes()

    def test_covers_every_case(self, workdir):
        truth = read_truth_csv(workdir / "data" / "truth.csv", Task.T2)
        rows = read_predictions_csv(workdir / "preds.csv")
        assert {r.case_id for r in rows} == set(truth)

    def test_corrupt_checkpoint_exit_5(self, workdir, tmp_path, capsys):
        blob = bytearray((workdir / "model.ckpt").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        rc = main(
            [
                "predict",
                "--ckpt", str(bad),
                "--data", str(workdir / "data" / "dataset.csv"),
                "--out", str(tmp_path / "p.csv"),
            ]
        )
        assert rc == 5
        assert "checksum" in capsys.readouterr().err

    def test_missing_checkpoint_exit_5(self, workdir, tmp_path):
        rc = main(
            [
                "predict",
                "--ckpt", str(tmp_path / "nope.ckpt"),
                "--data", str(workdir / "data" / "dataset.csv"),
                "--out", str(tmp_path / "p.csv"),
            ]
        )
        assert rc == 5


def stable_row(case: str, vol: str, peak_class: int = 1) -> PredRow:
    probs = np.full(3, 0.05)
    probs[peak_class] = 0.9
    return PredRow(
        case_id=case, patient_id="P000", volume_id=vol, bscan_index="0",
        true_label=1, probs=probs, pred_label=peak_class,
    )


class TestEnsemble:
    def test_unanimity_dissent_and_postprocess(self, tmp_path):
        # Nine Stable B-scans and one Worsened in one volume: model B dissents
        # on one record, so unanimity flips it, but the volume stays 90%
        # Stable and consistency relabels everything Stable.
        rows_a = [stable_row(f"c{i}", "P000_V00") for i in range(10)]
        rows_b = rows_a[:9] + [stable_row("c9", "P000_V00", peak_class=2)]
        write_predictions_csv(tmp_path / "a.csv", rows_a)
        write_predictions_csv(tmp_path / "b.csv", rows_b)
        rc = main(
            [
                "ensemble", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                "--mode", "unanimity", "--postprocess",
                "--out", str(tmp_path / "comb.csv"),
            ]
        )
        assert rc == 0
        combined = read_predictions_csv(tmp_path / "comb.csv")
        by_case = {r.case_id: r for r in combined}
        assert by_case["c9"].pred_label == 2  # dissent beats the stable majority
        assert all(r.final_label == 1 for r in combined)  # volume vote restores Stable
        assert all(r.postprocessed == 1 for r in combined)

    def test_mean_mode_single_file_is_passthrough(self, workdir, tmp_path):
        rc = main(
            [
                "ensemble", str(workdir / "preds.csv"),
                "--mode", "mean",
                "--out", str(tmp_path / "one.csv"),
            ]
        )
        assert rc == 0
        orig = read_predictions_csv(workdir / "preds.csv")
        out = read_predictions_csv(tmp_path / "one.csv")
        assert [r.pred_label for r in out] == [r.pred_label for r in orig]
        assert all(r.final_label == r.pred_label and r.postprocessed == 0 for r in out)

    def test_postprocess_yields_one_label_per_volume(self, workdir, tmp_path):
        rc = main(
            [
                "ensemble", str(workdir / "preds.csv"),
                "--postprocess",
                "--out", str(tmp_path / "post.csv"),
            ]
        )
        assert rc == 0
        by_volume: dict[str, set[int]] = {}
        for r in read_predictions_csv(tmp_path / "post.csv"):
            by_volume.setdefault(r.volume_id, set()).add(r.final_label)
        assert all(len(labels) == 1 for labels in by_volume.values())

    def test_mixed_class_counts_exit_3(self, workdir, tmp_path, capsys):
        wide = [
            PredRow(
                case_id="x", patient_id="P0", volume_id="", bscan_index="",
                true_label=0, probs=np.array([0.25, 0.25, 0.25, 0.25]), pred_label=0,
            )
        ]
        write_predictions_csv(tmp_path / "t1.csv", wide)
        rc = main(
            [
                "ensemble", str(workdir / "preds.csv"), str(tmp_path / "t1.csv"),
                "--out", str(tmp_path / "comb.csv"),
            ]
        )
        assert rc == 3
        assert "class counts" in capsys.readouterr().err

    def test_misaligned_keys_exit_6(self, workdir, tmp_path, capsys):
        rows = read_predictions_csv(workdir / "preds.csv")
        write_predictions_csv(tmp_path / "short.csv", rows[:-1])
        rc = main(
            [
                "ensemble", str(workdir / "preds.csv"), str(tmp_path / "short.csv"),
                "--out", str(tmp_path / "comb.csv"),
            ]
        )
        assert rc == 6
        assert "offenders" in capsys.readouterr().err

    def test_postprocess_without_volume_ids_exit_3(self, tmp_path, capsys):
        rows = [
            PredRow(
                case_id=f"pair{i}", patient_id="P0", volume_id="", bscan_index="",
                true_label=0, probs=np.array([0.25, 0.25, 0.25, 0.25]), pred_label=0,
            )
            for i in range(3)
        ]
        write_predictions_csv(tmp_path / "t1.csv", rows)
        rc = main(
            [
                "ensemble", str(tmp_path / "t1.csv"), "--postprocess",
                "--out", str(tmp_path / "comb.csv"),
            ]
        )
        assert rc == 3
        assert "volume ids" in capsys.readouterr().err


class TestEval:
    def test_perfect_predictions_score_one(self, workdir, tmp_path, capsys):
        truth = read_truth_csv(workdir / "data" / "truth.csv", Task.T2)
        rows = []
        for r in read_predictions_csv(workdir / "preds.csv"):
            label = truth[r.case_id]
            probs = np.full(3, 0.01)
            probs[label] = 0.98
            rows.append(
                PredRow(
                    case_id=r.case_id, patient_id=r.patient_id, volume_id=r.volume_id,
                    bscan_index=r.bscan_index, true_label=label, probs=probs, pred_label=label,
                )
            )
        write_predictions_csv(tmp_path / "perfect.csv", rows)
        rc = main(
            [
                "eval",
                "--pred", str(tmp_path / "perfect.csv"),
                "--truth", str(workdir / "data" / "truth.csv"),
                "--task", "t2",
                "--out", str(tmp_path / "report.csv"),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "micro_f1            1.000000" in out
        assert "average             1.000000" in out
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0].startswith("task,micro_f1,")
        assert lines[1].startswith("t2,1.000000,")

    def test_eval_respects_final_label_column(self, workdir, tmp_path, capsys):
        truth = read_truth_csv(workdir / "data" / "truth.csv", Task.T2)
        rows = []
        for r in read_predictions_csv(workdir / "preds.csv"):
            label = truth[r.case_id]
            wrong = (label + 1) % 3
            probs = np.full(3, 0.01)
            probs[wrong] = 0.98
            rows.append(
                PredRow(
                    case_id=r.case_id, patient_id=r.patient_id, volume_id=r.volume_id,
                    bscan_index=r.bscan_index, true_label=label, probs=probs,
                    pred_label=wrong, final_label=label, postprocessed=1,
                )
            )
        write_predictions_csv(tmp_path / "fixed.csv", rows)
        rc = main(
            [
                "eval",
                "--pred", str(tmp_path / "fixed.csv"),
                "--truth", str(workdir / "data" / "truth.csv"),
                "--task", "t2",
                "--out", str(tmp_path / "report.csv"),
            ]
        )
        assert rc == 0
        assert "micro_f1            1.000000" in capsys.readouterr().out

    def test_misaligned_keys_exit_6(self, workdir, tmp_path, capsys):
        rows = read_predictions_csv(workdir / "preds.csv")
        write_predictions_csv(tmp_path / "short.csv", rows[:-2])
        rc = main(
            [
                "eval",
                "--pred", str(tmp_path / "short.csv"),
                "--truth", str(workdir / "data" / "truth.csv"),
                "--task", "t2",
            ]
        )
        assert rc == 6
        err = capsys.readouterr().err
        assert "offenders" in err and rows[-1].case_id in err

    def test_width_mismatch_exit_3(self, workdir, tmp_path):
        truth = read_truth_csv(workdir / "data" / "truth.csv", Task.T2)
        rows = [
            PredRow(
                case_id=k, patient_id="P0", volume_id="", bscan_index="",
                true_label=v, probs=np.array([0.25, 0.25, 0.25, 0.25]), pred_label=0,
            )
            for k, v in truth.items()
        ]
        write_predictions_csv(tmp_path / "wide.csv", rows)
        rc = main(
            [
                "eval",
                "--pred", str(tmp_path / "wide.csv"),
                "--truth", str(workdir / "data" / "truth.csv"),
                "--task", "t2",
            ]
        )
        assert rc == 3


class TestGradcheck:
    def test_passes_with_default_losses(self, capsys):
        assert main(["gradcheck", "--trials", "6", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert "gradient check passed" in out
        for kind in ("ce", "focal", "emd", "combined"):
            assert kind in out

    def test_detects_broken_gradients(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "finite_difference_check", lambda *a, **k: 1.0)
        assert main(["gradcheck", "--trials", "5", "--losses", "ce"]) == 7
        assert "gradient check FAILED" in capsys.readouterr().out

    def test_unknown_loss_exit_3(self):
        assert main(["gradcheck", "--losses", "hinge"]) == 3

    def test_zero_trials_exit_3(self):
        assert main(["gradcheck", "--trials", "0"]) == 3
