import json

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from conftest import (
    tiny_discriminator_config,
    tiny_generator_config,
    write_interchange_subject,
)
from ppg2ecg.cli import main
from ppg2ecg.dataset import PairStore
from ppg2ecg.models import GeneratorConfig, build_discriminator, build_generator, save_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def six_subjects(tmp_path):
    root = tmp_path / "interchange"
    for i in range(6):
        write_interchange_subject(root, f"S{i + 1}", duration_s=60.0,
                                  hr_hz=1.0 + 0.1 * i, seed=i)
    return root


def preprocess(runner, root, out, seed=0):
    return runner.invoke(main, ["preprocess", "--data", str(root),
                                "--out", str(out), "--seed", str(seed)])


class TestPreprocess:
    def test_six_subject_run_writes_stores_and_report(self, runner, six_subjects,
                                                      tmp_path):
        out = tmp_path / "pairs"
        result = preprocess(runner, six_subjects, out)
        assert result.exit_code == 0, result.output
        report = json.loads((out / "split_report.json").read_text())
        sizes = {k: len(v) for k, v in report["subjects"].items()}
        assert sizes == {"train": 4, "validation": 1, "test": 1}
        for name in ("pairs_train.npz", "pairs_validation.npz", "pairs_test.npz",
                     "pairs_validation_eval.npz", "pairs_test_eval.npz"):
            assert (out / name).exists(), name
        train_store = PairStore.load(out / "pairs_train.npz")
        assert train_store.window == 512
        eval_store = PairStore.load(out / "pairs_test_eval.npz")
        assert eval_store.window == 1280
        assert "split subjects:" in result.output

    def test_rerun_same_seed_is_identical(self, runner, six_subjects, tmp_path):
        a = preprocess(runner, six_subjects, tmp_path / "a", seed=5)
        b = preprocess(runner, six_subjects, tmp_path / "b", seed=5)
        assert a.exit_code == b.exit_code == 0
        ra = json.loads((tmp_path / "a" / "split_report.json").read_text())
        rb = json.loads((tmp_path / "b" / "split_report.json").read_text())
        assert ra["subjects"] == rb["subjects"]
        assert ra["segment_counts"] == rb["segment_counts"]
        sa = PairStore.load(tmp_path / "a" / "pairs_train.npz")
        sb = PairStore.load(tmp_path / "b" / "pairs_train.npz")
        assert np.array_equal(sa.ppg, sb.ppg) and np.array_equal(sa.ecg, sb.ecg)

    def test_single_subject_degenerates_with_warning(self, runner, tmp_path):
        root = tmp_path / "one"
        write_interchange_subject(root, "S1", duration_s=60.0)
        result = preprocess(runner, root, tmp_path / "pairs")
        assert result.exit_code == 0
        assert "warning" in result.output
        report = json.loads((tmp_path / "pairs" / "split_report.json").read_text())
        assert report["subjects"]["train"] == ["S1"]
        assert report["subjects"]["test"] == []

    def test_malformed_input_exits_2(self, runner, tmp_path):
        root = tmp_path / "bad"
        d = write_interchange_subject(root, "S1", duration_s=30.0)
        (d / "meta.json").unlink()
        result = preprocess(runner, root, tmp_path / "pairs")
        assert result.exit_code == 2
        assert "missing metadata" in result.output

    def test_manifest_appends_one_entry_per_run(self, runner, six_subjects,
                                                tmp_path):
        out = tmp_path / "pairs"
        preprocess(runner, six_subjects, out)
        preprocess(runner, six_subjects, out)
        lines = (out / "manifest.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        assert all(json.loads(line)["command"] == "preprocess" for line in lines)


def tiny_config_file(tmp_path, epochs=1):
    cfg = {
        "train_config": {
            "epochs": epochs,
            "lr_constant_epochs": 0,
            "batch_size": 8,
            "generator": {"encoder_filters": [4, 8], "encoder_strides": [2, 2],
                          "kernel_size": 4, "input_length": 512,
                          "attention_gates": True},
            "discriminator": {"filters": [4, 8], "kernel_size": 4, "stride": 1},
        }
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestTrainEvaluateRoundTrip:
    def test_full_cli_pipeline(self, runner, six_subjects, tmp_path):
        pairs = tmp_path / "pairs"
        assert preprocess(runner, six_subjects, pairs).exit_code == 0
        config = tiny_config_file(tmp_path)

        result = runner.invoke(main, [
            "--config", str(config), "train", "--pairs", str(pairs),
            "--objective", "gan_freq", "--seed", "0", "--out", str(tmp_path / "runs")])
        assert result.exit_code == 0, result.output
        run_dir = tmp_path / "runs" / "gan_freq_seed000"
        assert (run_dir / "summary.json").exists()
        ckpt = sorted((run_dir / "checkpoints").glob("*.ckpt"))[-1]

        result = runner.invoke(main, [
            "synthesize", "--checkpoint", str(ckpt),
            "--pairs", str(pairs / "pairs_test_eval.npz"),
            "--out", str(tmp_path / "synth")])
        assert result.exit_code == 0, result.output
        with np.load(tmp_path / "synth" / "synthetic.npz") as z:
            store = PairStore.load(pairs / "pairs_test_eval.npz")
            assert z["synth"].shape == store.ppg.shape

        result = runner.invoke(main, [
            "evaluate", "--checkpoint", str(ckpt),
            "--pairs", str(pairs / "pairs_test_eval.npz"),
            "--ppg-baseline", "--out", str(tmp_path / "eval")])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report["seed_stats"]["objective"] == "gan_freq"
        assert (tmp_path / "eval" / "report.csv").exists()
        assert "MAPE by subset" in result.output

    def test_resume_flag_continues_run(self, runner, six_subjects, tmp_path):
        pairs = tmp_path / "pairs"
        preprocess(runner, six_subjects, pairs)
        config = tiny_config_file(tmp_path, epochs=2)
        args = ["--config", str(config), "train", "--pairs", str(pairs),
                "--objective", "gan", "--seed", "1", "--out", str(tmp_path / "runs")]
        assert runner.invoke(main, args).exit_code == 0
        # resuming a finished run is a no-op but must succeed
        result = runner.invoke(main, args + ["--resume"])
        assert result.exit_code == 0, result.output


class TestExitCodes:
    def test_fingerprint_mismatch_exits_4(self, runner, tmp_path):
        gen = build_generator(tiny_generator_config(), seed=0)
        disc = build_discriminator(tiny_discriminator_config(), seed=0)
        ckpt = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, generator=gen, discriminator=disc)
        payload = torch.load(ckpt, weights_only=False)
        payload["fingerprint"] = "0" * 16
        torch.save(payload, ckpt)
        store_path = tmp_path / "pairs.npz"
        from conftest import tiny_store
        tiny_store(4, window=1280).save(store_path)
        result = runner.invoke(main, ["evaluate", "--checkpoint", str(ckpt),
                                      "--pairs", str(store_path),
                                      "--out", str(tmp_path / "eval")])
        assert result.exit_code == 4

    def test_missing_store_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["train", "--pairs", str(tmp_path),
                                      "--out", str(tmp_path / "runs")])
        assert result.exit_code == 2

    def test_import_without_converter_reports_cleanly(self, runner, tmp_path):
        archive = tmp_path / "subject.pkl"
        archive.write_bytes(b"xx")
        result = runner.invoke(main, ["import", "--in", str(archive),
                                      "--out", str(tmp_path / "out")])
        # either the converter package is installed (and rejects the junk
        # archive) or it is absent; both are input errors, never a crash
        assert result.exit_code == 2
        assert "error:" in result.output


class TestImportDelegation:
    @pytest.fixture
    def archive(self, tmp_path):
        pytest.importorskip("dalia_import")
        import pickle
        rng = np.random.default_rng(0)
        data = {
            "subject": "S1",
            "signal": {
                "wrist": {"BVP": rng.normal(size=(20 * 64, 1))},
                "chest": {"ECG": rng.normal(size=(20 * 700, 1))},
            },
            "activity": np.array([0] * 20 + [1] * 60, dtype=float).reshape(-1, 1),
        }
        path = tmp_path / "S1.pkl"
        with path.open("wb") as fh:
            pickle.dump(data, fh)
        return path

    def test_import_produces_loadable_interchange_data(self, runner, tmp_path,
                                                       archive):
        out = tmp_path / "interchange"
        result = runner.invoke(main, ["import", "--in", str(archive),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        from ppg2ecg.dataset import load_subject
        record = load_subject(out / "S1")
        assert record.ppg.rate == 64.0 and record.ecg.rate == 700.0
        lines = (out / "manifest.jsonl").read_text().strip().splitlines()
        assert json.loads(lines[-1])["command"] == "import"


class TestReport:
    def write_sweep(self, path, objective, mapes):
        path.write_text(json.dumps({
            "objective": objective,
            "seeds": list(range(len(mapes))),
            "per_seed": [{"seed": i, "run_dir": "x", "best_checkpoint": None,
                          "val_mape": v, "error": None}
                         for i, v in enumerate(mapes)],
        }))

    def write_eval_report(self, directory, objective, mape_pct, failures):
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps({
            "subsets": {"all": {"mape_percent": mape_pct, "n_windows": 10,
                                "n_failures": failures, "n_real_failures": 0},
                        "active": None, "not_active": None},
            "n_windows": 10,
            "n_synth_failures": failures,
            "failure_mode": "exclude",
            "ppg_baseline": None,
            "seed_stats": {"seed": 0, "objective": objective},
        }))

    def test_histograms_and_tables_from_reports(self, runner, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        rng = np.random.default_rng(0)
        self.write_sweep(runs / "sweep_gan.json", "gan",
                         list(rng.normal(20, 6, size=8)))
        self.write_sweep(runs / "sweep_gan_freq.json", "gan_freq",
                         list(rng.normal(13, 2, size=8)))
        self.write_eval_report(runs / "eval_gan", "gan", 14.0, 40)
        self.write_eval_report(runs / "eval_freq", "gan_freq", 12.0, 6)
        result = runner.invoke(main, ["report", "--runs", str(runs),
                                      "--out", str(tmp_path / "report")])
        assert result.exit_code == 0, result.output
        out = tmp_path / "report"
        assert (out / "mape_distribution.svg").exists()
        assert (out / "mape_distribution.csv").exists()
        assert (out / "failure_counts.svg").exists()
        table = (out / "comparison_table.csv").read_text()
        assert "gan_freq" in table

    def test_single_run_degenerate_histogram(self, runner, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        self.write_sweep(runs / "sweep_gan.json", "gan", [17.0])
        result = runner.invoke(main, ["report", "--runs", str(runs),
                                      "--out", str(tmp_path / "report")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "report" / "mape_distribution.svg").exists()

    def test_corrupt_report_names_file_and_exits_2(self, runner, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        bad = runs / "report.json"
        bad.write_text("{oops")
        result = runner.invoke(main, ["report", "--runs", str(runs),
                                      "--out", str(tmp_path / "report")])
        assert result.exit_code == 2
        assert "report.json" in result.output

    def test_empty_input_set_rejected(self, runner, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        result = runner.invoke(main, ["report", "--runs", str(runs),
                                      "--out", str(tmp_path / "report")])
        assert result.exit_code == 2


class TestConfigResolution:
    def test_flags_override_config_file(self, runner, six_subjects, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"preprocess": {"seed": 1}}))
        out = tmp_path / "pairs"
        result = runner.invoke(main, ["--config", str(config), "preprocess",
                                      "--data", str(six_subjects),
                                      "--out", str(out), "--seed", "2"])
        assert result.exit_code == 0
        report = json.loads((out / "split_report.json").read_text())
        assert report["split_seed"] == 2

    def test_config_file_supplies_missing_flag(self, runner, six_subjects,
                                               tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"preprocess": {"seed": 9}}))
        out = tmp_path / "pairs"
        result = runner.invoke(main, ["--config", str(config), "preprocess",
                                      "--data", str(six_subjects),
                                      "--out", str(out)])
        assert result.exit_code == 0
        report = json.loads((out / "split_report.json").read_text())
        assert report["split_seed"] == 9

    def test_global_flag_beats_config_file(self, runner, six_subjects, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"preprocess": {"seed": 9}}))
        out = tmp_path / "pairs"
        result = runner.invoke(main, ["--config", str(config), "--seed", "3",
                                      "preprocess", "--data", str(six_subjects),
                                      "--out", str(out)])
        assert result.exit_code == 0
        report = json.loads((out / "split_report.json").read_text())
        assert report["split_seed"] == 3
