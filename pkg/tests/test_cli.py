"""End-to-end command-line driver checks (fast, tiny runs)."""

import csv
import json

import numpy as np
import pytest

from civet.cli import EXIT_OK, EXIT_USAGE, main
from civet.selftest import run_selftest


TINY_CFG = """
method = civet
epsilon = 0.05
delta_schedule = 0.35,0.2,0.05
learning_rate = 0.003
epochs = 2
batch_size = 16
warmup_standard_iters = 2
warmup_ramp_iters = 3
seed = 7
dataset = synthetic:n=48,d=8
architecture = synth
delta = 0.05
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY_CFG + f"output_dir = {tmp_path / 'out'}\n")
    return cfg


@pytest.fixture()
def trained(tiny_cfg, tmp_path):
    import time
    t0 = time.perf_counter()
    assert main(["train", "--config", str(tiny_cfg)]) == EXIT_OK
    assert time.perf_counter() - t0 < 60.0
    out = tmp_path / "out"
    return tiny_cfg, out, out / "checkpoint.cvck"


class TestTrain:
    def test_writes_artifacts(self, trained):
        _, out, ckpt = trained
        assert ckpt.exists()
        assert (out / "training_log.csv").exists()
        assert (out / "training_curves.png").exists()
        header = (out / "training_log.csv").read_text().splitlines()[0]
        assert header == "epoch,iter,std_loss,civet_loss,epsilon_current,wall_ms"

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("method = standard\nnot_a_key = 3\n")
        assert main(["train", "--config", str(bad)]) == EXIT_USAGE
        assert "line 2" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == EXIT_USAGE

    def test_seed_override_changes_output_deterministically(self, tiny_cfg, tmp_path):
        outs = []
        for run, seed in (("a", "7"), ("b", "7"), ("c", "8")):
            out = tmp_path / f"out_{run}"
            assert main(["train", "--config", str(tiny_cfg), "--override", f"seed={seed}",
                         "--output-dir", str(out)]) == EXIT_OK
            outs.append((out / "checkpoint.cvck").read_bytes())
        assert outs[0] == outs[1]
        assert outs[0] != outs[2]

    def test_bad_override_exit_2(self, tiny_cfg, capsys):
        assert main(["train", "--config", str(tiny_cfg),
                     "--override", "epochs"]) == EXIT_USAGE
        assert "KEY=VALUE" in capsys.readouterr().err


class TestReports:
    def test_certify_report(self, trained):
        cfg, out, ckpt = trained
        assert main(["certify", "--config", str(cfg), "--checkpoint", str(ckpt)]) == EXIT_OK
        with open(out / "certify_report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and set(rows[0]) == {"example_id", "baseline", "certified"}
        summary = json.loads((out / "certify_summary.json").read_text())
        assert summary["count"] == len(rows)
        assert "certified" in summary["means"]
        assert (out / "certify_report.png").exists()

    def test_eval_with_attacks(self, trained):
        cfg, out, ckpt = trained
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--attacks", "pgd,mda", "--override", "pgd_steps=2"]) == EXIT_OK
        with open(out / "eval_report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0]) == {"example_id", "baseline", "certified", "pgd", "mda"}

    def test_attack_zero_epsilon_equals_baseline(self, trained):
        cfg, out, ckpt = trained
        assert main(["attack", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--attack", "mda", "--override", "epsilon=0.0"]) == EXIT_OK
        with open(out / "attack_mda_report.csv") as fh:
            for row in csv.DictReader(fh):
                assert float(row["mda"]) == float(row["baseline"])
                assert row["certified"] == ""

    def test_unknown_attack_usage_error(self, trained):
        cfg, _, ckpt = trained
        with pytest.raises(SystemExit) as exc:
            main(["attack", "--config", str(cfg), "--checkpoint", str(ckpt),
                  "--attack", "boundary"])
        assert exc.value.code == EXIT_USAGE

    def test_checkpoint_arch_mismatch(self, trained, tmp_path):
        cfg, _, ckpt = trained
        other = tmp_path / "other.cfg"
        other.write_text(TINY_CFG.replace("architecture = synth",
                                          "architecture = mnist_fc")
                         + f"output_dir = {tmp_path / 'o2'}\n")
        rc = main(["certify", "--config", str(other), "--checkpoint", str(ckpt)])
        assert rc != EXIT_OK

    def test_outputs_confined_to_output_dir(self, trained, tmp_path):
        _, out, _ = trained
        produced = {p.relative_to(tmp_path).parts[0] for p in tmp_path.rglob("*")
                    if p.is_file() and p.suffix in (".csv", ".png", ".cvck", ".json")}
        assert produced == {"out"}


class TestDeterminism:
    def test_repeat_run_bit_identical_reports(self, tiny_cfg, tmp_path):
        blobs = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            assert main(["train", "--config", str(tiny_cfg),
                         "--output-dir", str(out)]) == EXIT_OK
            assert main(["certify", "--config", str(tiny_cfg),
                         "--checkpoint", str(out / "checkpoint.cvck"),
                         "--output-dir", str(out)]) == EXIT_OK
            blobs.append(((out / "checkpoint.cvck").read_bytes(),
                          (out / "certify_report.csv").read_bytes(),
                          (out / "certify_summary.json").read_bytes()))
        assert blobs[0] == blobs[1]


class TestSelftest:
    def test_passes_clean_under_budget(self, capsys):
        import time
        t0 = time.perf_counter()
        assert run_selftest() is True
        assert time.perf_counter() - t0 < 30.0
        out = capsys.readouterr().out
        assert "[PASS] support worked example" in out
        assert "[FAIL]" not in out

    def test_corrupted_quantile_fails_worked_example(self, capsys):
        assert run_selftest(corrupt_quantile=True) is False
        out = capsys.readouterr().out
        assert "[FAIL] support worked example" in out

    def test_cli_selftest_exit_code(self):
        assert main(["selftest"]) == EXIT_OK
