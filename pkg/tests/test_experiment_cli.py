"""End-to-end experiment orchestration and the command-line interface."""

import json
import shutil

import numpy as np
import pytest

from cavseg.cli import main
from cavseg.evalstat import read_metrics_csv
from cavseg.experiment import ExperimentConfig, derive_seed, run_experiment
from cavseg.phantom import PhantomConfig, generate_dataset
from cavseg.volgrid import load_mask, load_manifest


TINY_PHANTOM = {
    "grid": [16, 16, 16],
    "cavity_radius_range": [2.5, 3.5],
    "rim_thickness": 1.0,
    "drift": 0.05,
    "seed": 5,
}


def tiny_dataset(tmp_path, n_patients=3, timepoints=(2, 2, 2)):
    cfg = PhantomConfig.from_dict(TINY_PHANTOM)
    return generate_dataset(cfg, n_patients, list(timepoints), tmp_path / "data")


def tiny_experiment_doc(manifest_path, configs=("T1C_ONLY", "FLAIR_ONLY")):
    return {
        "manifest": str(manifest_path),
        "sequence_configs": list(configs),
        "n_folds": 2,
        "fold_mode": "by-volume",
        "master_seed": 3,
        "model": {"levels": 2, "base_channels": 2},
        "sampler": {"patch_size": [8, 8, 8], "fg_fraction": 0.8},
        "train": {"batch_size": 2, "max_iterations": 2, "val_check_interval": 1},
        "inference": {"window": [8, 8, 8], "overlap_fraction": 0.0},
    }


class TestSeedDerivation:
    def test_stable_and_distinct(self):
        a = derive_seed(0, "T1C_ONLY", 0)
        assert a == derive_seed(0, "T1C_ONLY", 0)
        assert a != derive_seed(0, "T1C_ONLY", 1)
        assert a != derive_seed(1, "T1C_ONLY", 0)
        assert 0 <= a < 2**63


class TestRunExperiment:
    def test_end_to_end_structure(self, tmp_path):
        manifest, entries = tiny_dataset(tmp_path)
        cfg = ExperimentConfig.from_dict(tiny_experiment_doc(manifest))
        out = tmp_path / "exp"
        report = run_experiment(cfg, out)
        records = read_metrics_csv(out / "metrics.csv")
        assert len(records) == 2 * len(entries)  # each config covers every case once
        assert (out / "summary.json").exists()
        unit_dirs = sorted(p.name for p in (out / "units").iterdir())
        assert unit_dirs == ["FLAIR_ONLY_f0", "FLAIR_ONLY_f1", "T1C_ONLY_f0", "T1C_ONLY_f1"]
        for d in (out / "units").iterdir():
            assert (d / "ckpt.json").exists()
            assert (d / "ckpt.bin").exists()
            assert (d / "DONE.json").exists()
        assert set(report.per_config) == {"T1C_ONLY", "FLAIR_ONLY"}

    def test_byte_identical_across_runs(self, tmp_path):
        manifest, _ = tiny_dataset(tmp_path)
        cfg = ExperimentConfig.from_dict(tiny_experiment_doc(manifest))
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()

    def test_resume_skips_completed_units(self, tmp_path):
        manifest, _ = tiny_dataset(tmp_path)
        cfg = ExperimentConfig.from_dict(tiny_experiment_doc(manifest))
        out = tmp_path / "exp"
        run_experiment(cfg, out)
        original = (out / "metrics.csv").read_bytes()
        # simulate an interruption: lose one unit and the aggregates
        shutil.rmtree(out / "units" / "T1C_ONLY_f1")
        (out / "metrics.csv").unlink()
        (out / "summary.json").unlink()
        before = (out / "units" / "FLAIR_ONLY_f0" / "ckpt.bin").stat().st_mtime_ns
        run_experiment(cfg, out)
        after = (out / "units" / "FLAIR_ONLY_f0" / "ckpt.bin").stat().st_mtime_ns
        assert before == after  # untouched unit was skipped
        assert (out / "metrics.csv").read_bytes() == original

    def test_changed_config_invalidates_sentinel(self, tmp_path):
        manifest, _ = tiny_dataset(tmp_path)
        doc = tiny_experiment_doc(manifest, configs=("T1C_ONLY",))
        out = tmp_path / "exp"
        run_experiment(ExperimentConfig.from_dict(doc), out)
        sentinel = out / "units" / "T1C_ONLY_f0" / "DONE.json"
        hash_before = json.loads(sentinel.read_text())["content_hash"]
        mtime_before = (out / "units" / "T1C_ONLY_f0" / "ckpt.bin").stat().st_mtime_ns
        doc["train"]["max_iterations"] = 3
        run_experiment(ExperimentConfig.from_dict(doc), out)
        hash_after = json.loads(sentinel.read_text())["content_hash"]
        mtime_after = (out / "units" / "T1C_ONLY_f0" / "ckpt.bin").stat().st_mtime_ns
        assert hash_after != hash_before  # config change re-ran the unit
        assert mtime_after != mtime_before

    def test_parallel_jobs_match_serial(self, tmp_path):
        manifest, _ = tiny_dataset(tmp_path)
        cfg = ExperimentConfig.from_dict(tiny_experiment_doc(manifest))
        run_experiment(cfg, tmp_path / "serial", jobs=1)
        run_experiment(cfg, tmp_path / "parallel", jobs=2)
        assert (tmp_path / "serial" / "metrics.csv").read_bytes() == \
            (tmp_path / "parallel" / "metrics.csv").read_bytes()


class TestCliPhantomGen:
    def write_config(self, tmp_path, n_patients, timepoints, seed=5):
        doc = dict(TINY_PHANTOM, seed=seed, n_patients=n_patients,
                   timepoints_per_patient=list(timepoints))
        path = tmp_path / "phantom.json"
        path.write_text(json.dumps(doc))
        return path

    def test_47_case_dataset(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, 14, [6, 6, 6, 5, 5, 5, 4, 4, 1, 1, 1, 1, 1, 1])
        code = main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert code == 0
        assert capsys.readouterr().out.strip() == "47"
        assert len(load_manifest(tmp_path / "d" / "manifest.json")) == 47

    def test_zero_patients_config_error(self, tmp_path):
        cfg = self.write_config(tmp_path, 0, [])
        assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2

    def test_same_seed_identical_manifests(self, tmp_path):
        cfg = self.write_config(tmp_path, 2, [1, 2])
        assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "d1")]) == 0
        assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "d2")]) == 0
        assert (tmp_path / "d1" / "manifest.json").read_bytes() == \
            (tmp_path / "d2" / "manifest.json").read_bytes()

    def test_bad_json_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["phantom-gen", "--config", str(path), "--out", str(tmp_path / "d")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["phantom-gen", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 3


class TestCliExperimentAndReport:
    def test_experiment_smoke_zero_iterations(self, tmp_path, capsys):
        manifest, entries = tiny_dataset(tmp_path)
        doc = tiny_experiment_doc(manifest, configs=("T1C_ONLY",))
        doc["train"]["max_iterations"] = 0
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(doc))
        out = tmp_path / "exp"
        code = main(["experiment", "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
        records = read_metrics_csv(out / "metrics.csv")
        assert len(records) == len(entries)
        table = capsys.readouterr().out
        assert "T1C_ONLY" in table and "(best)" in table

    def test_report_command(self, tmp_path, capsys):
        manifest, _ = tiny_dataset(tmp_path)
        doc = tiny_experiment_doc(manifest)
        doc["train"]["max_iterations"] = 0
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(doc))
        out = tmp_path / "exp"
        assert main(["experiment", "--config", str(cfg_path), "--out", str(out)]) == 0
        capsys.readouterr()
        rep_out = tmp_path / "rep"
        code = main(["report", "--metrics", str(out / "metrics.csv"), "--out", str(rep_out)])
        assert code == 0
        assert (rep_out / "summary.json").exists()
        assert (rep_out / "boxplot.csv").exists()
        summary = json.loads((rep_out / "summary.json").read_text())
        assert set(summary["configs"]) == {"T1C_ONLY", "FLAIR_ONLY"}
        assert all(t["stars"] in ("", "*", "**", "n/a") for t in summary["tests"])

    def test_report_empty_metrics(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("case_id,patient_id,fold,config,dice,jaccard\n")
        assert main(["report", "--metrics", str(path), "--out", str(tmp_path)]) == 2

    def test_report_single_config_no_tests(self, tmp_path, capsys):
        path = tmp_path / "metrics.csv"
        rows = ["case_id,patient_id,fold,config,dice,jaccard"]
        for i in range(4):
            rows.append(f"c{i},p{i},0,T2_ONLY,0.5,0.3333333333333333")
        path.write_text("\n".join(rows) + "\n")
        assert main(["report", "--metrics", str(path), "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["tests"] == []


class TestCliTrainPredictEvaluate:
    def test_train_predict_evaluate_cycle(self, tmp_path, capsys):
        manifest, entries = tiny_dataset(tmp_path)
        train_doc = {
            "manifest": str(manifest),
            "sequences": "T1C_ONLY",
            "seed": 2,
            "model": {"levels": 2, "base_channels": 2},
            "sampler": {"patch_size": [8, 8, 8]},
            "train": {"batch_size": 2, "max_iterations": 1, "val_check_interval": 1},
        }
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps(train_doc))
        ckpt_dir = tmp_path / "ckpt"
        assert main(["train", "--config", str(cfg_path), "--out", str(ckpt_dir)]) == 0
        assert "best_val_jaccard=" in capsys.readouterr().out
        pred_dir = tmp_path / "pred"
        code = main([
            "predict", "--ckpt", str(ckpt_dir), "--manifest", str(manifest),
            "--case", "p000_t0", "--case", "p001_t0", "--out", str(pred_dir),
        ])
        assert code == 0
        mask = load_mask(pred_dir / "p000_t0_mask.nii.gz")
        assert mask.dims == (16, 16, 16)
        # evaluate only the predicted subset
        sub = [e for e in load_manifest(manifest) if e.case_id in ("p000_t0", "p001_t0")]
        from cavseg.volgrid import save_manifest

        sub_manifest = manifest.parent / "sub.json"  # keep relative paths valid
        save_manifest(sub, sub_manifest)
        metrics_out = tmp_path / "m.csv"
        code = main([
            "evaluate", "--manifest", str(sub_manifest), "--pred", str(pred_dir),
            "--label", "T1C_ONLY", "--out", str(metrics_out),
        ])
        assert code == 0
        records = read_metrics_csv(metrics_out)
        assert len(records) == 2
        assert all(0.0 <= r.dice <= 1.0 for r in records)

    def test_predict_unknown_case(self, tmp_path):
        manifest, _ = tiny_dataset(tmp_path)
        train_doc = {
            "manifest": str(manifest), "sequences": "T1C_ONLY",
            "model": {"levels": 2, "base_channels": 1},
            "sampler": {"patch_size": [8, 8, 8]},
            "train": {"batch_size": 1, "max_iterations": 0},
        }
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps(train_doc))
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "ck")]) == 0
        assert main(["predict", "--ckpt", str(tmp_path / "ck"), "--manifest", str(manifest),
                     "--case", "ghost", "--out", str(tmp_path / "p")]) == 2
