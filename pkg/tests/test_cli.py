import csv
import json
from pathlib import Path

import pytest

from trajlm.cli import main

TRAIN_CONFIG = """
n_embd = 16
n_layers = 1
n_heads = 2
d_head = 4
continuous_pe_base_dim = 8
dropout = 0.0
max_seq_length = 256
lr = 0.002
gamma = 0.1
epochs = 1
batch_size = 4
warmup_steps = 5
seed = 9
SL_sigma = 0.01
augmentation_chance = 0.0
random_removal_chance = 0.0
random_block_removal_chance = 0.0
random_modality_subset_chance = 0.0
random_modality_exclusion_chance = 0.0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny end-to-end workspace shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cohort = root / "cohort.jsonl"
    vocab = root / "vocab.json"
    truth = root / "truth.json"
    assert main(["synth", "--seed", "7", "--participants", "24",
                 "--out", str(cohort), "--truth", str(truth), "--vocab-out", str(vocab)]) == 0
    config = root / "train.cfg"
    config.write_text(TRAIN_CONFIG, encoding="utf-8")
    ckpt = root / "model.ckpt"
    log = root / "train_log.csv"
    assert main(["train", "--cohort", str(cohort), "--vocab", str(vocab),
                 "--config", str(config), "--out", str(ckpt), "--log", str(log)]) == 0
    return {"root": root, "cohort": cohort, "vocab": vocab, "truth": truth, "ckpt": ckpt, "log": log}


class TestSynth:
    def test_deterministic_outputs(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert main(["synth", "--seed", "7", "--participants", "12", "--out", str(out),
                         "--truth", str(out) + ".truth.json"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert Path(str(a) + ".truth.json").read_bytes() == Path(str(b) + ".truth.json").read_bytes()

    def test_seed_env_override(self, tmp_path, monkeypatch):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        monkeypatch.setenv("TRAJLM_SEED", "99")
        assert main(["synth", "--seed", "7", "--participants", "8", "--out", str(a)]) == 0
        monkeypatch.delenv("TRAJLM_SEED")
        assert main(["synth", "--seed", "99", "--participants", "8", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_meta_sidecar(self, tmp_path):
        out = tmp_path / "c.jsonl"
        assert main(["synth", "--seed", "1", "--participants", "5", "--out", str(out)]) == 0
        meta = json.loads(Path(str(out) + ".meta.json").read_text())
        assert meta["seed"] == 1
        assert "config_hash" in meta and "version" in meta


class TestVocabAndTokenize:
    def test_build_vocab_from_cohort(self, workspace, tmp_path):
        out = tmp_path / "v.json"
        assert main(["build-vocab", "--cohort", str(workspace["cohort"]), "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        names = [m["name"] for m in doc["modalities"]]
        assert "x_core" in names and "medication" in names

    def test_tokenize(self, workspace, tmp_path):
        out = tmp_path / "tokens.jsonl"
        assert main(["tokenize", "--cohort", str(workspace["cohort"]),
                     "--vocab", str(workspace["vocab"]), "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 24
        for row in rows[:3]:
            assert len(row["modalities"]) == len(row["tokens"]) + 1
            assert len(row["times"]) == len(row["tokens"]) + 1
            assert 0 <= row["visit_boundary"] <= len(row["tokens"])

    def test_missing_cohort_is_error(self, tmp_path, capsys):
        rc = main(["build-vocab", "--cohort", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "v.json")])
        assert rc == 1
        assert "missing file" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log_written(self, workspace):
        assert workspace["ckpt"].exists()
        text = workspace["log"].read_text().splitlines()
        assert text[0].startswith("# seed=")
        assert any(line.startswith("# config_hash=") for line in text[:3])
        header_idx = next(i for i, line in enumerate(text) if not line.startswith("#"))
        assert text[header_idx] == "step,lr,loss,soft,mae,split,val_loss"
        assert len(text) > header_idx + 1

    def test_deterministic_checkpoints(self, workspace, tmp_path):
        config = tmp_path / "t.cfg"
        config.write_text(TRAIN_CONFIG, encoding="utf-8")
        outs = []
        for name in ("m1.ckpt", "m2.ckpt"):
            out = tmp_path / name
            assert main(["train", "--cohort", str(workspace["cohort"]), "--vocab", str(workspace["vocab"]),
                         "--config", str(config), "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_unknown_config_key_rejected(self, workspace, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("nonsense_key = 1\n", encoding="utf-8")
        rc = main(["train", "--cohort", str(workspace["cohort"]), "--vocab", str(workspace["vocab"]),
                   "--config", str(config), "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err


class TestInspect:
    def test_manifest_printed(self, workspace, capsys):
        assert main(["inspect-checkpoint", "--ckpt", str(workspace["ckpt"])]) == 0
        out = capsys.readouterr().out
        assert "tok_embed" in out
        assert "total parameters:" in out
        assert "vocab_sha256:" in out


class TestEval:
    def test_eval_ntp_report(self, workspace, tmp_path, capsys):
        report = tmp_path / "ntp.csv"
        summary = tmp_path / "ntp.json"
        assert main(["eval-ntp", "--ckpt", str(workspace["ckpt"]), "--cohort", str(workspace["cohort"]),
                     "--vocab", str(workspace["vocab"]), "--report", str(report), "--json", str(summary)]) == 0
        rows = [r for r in csv.reader(report.read_text().splitlines()) if r and not r[0].startswith("#")]
        assert rows[0] == ["modality", "n", "r", "p", "ci_low", "ci_high", "top1", "top5"]
        assert len(rows) > 3
        doc = json.loads(summary.read_text())
        assert "median_r" in doc

    def test_eval_longitudinal_with_locf(self, workspace, tmp_path):
        report = tmp_path / "long.csv"
        assert main(["eval-longitudinal", "--ckpt", str(workspace["ckpt"]), "--cohort", str(workspace["cohort"]),
                     "--vocab", str(workspace["vocab"]), "--baselines", "locf",
                     "--report", str(report), "--json", str(tmp_path / "long.json")]) == 0
        assert report.exists()
        assert (tmp_path / "long.csv.locf.csv").exists()

    def test_vocab_hash_mismatch_fails_before_inference(self, workspace, tmp_path, capsys):
        other_vocab = tmp_path / "other_vocab.json"
        assert main(["synth", "--seed", "123", "--participants", "6",
                     "--out", str(tmp_path / "o.jsonl"), "--vocab-out", str(other_vocab)]) == 0
        rc = main(["eval-ntp", "--ckpt", str(workspace["ckpt"]), "--cohort", str(workspace["cohort"]),
                   "--vocab", str(other_vocab), "--report", str(tmp_path / "r.csv")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "hash mismatch" in err
        assert not (tmp_path / "r.csv").exists()


class TestProbeAndSimulate:
    def test_probe_crossmodal(self, workspace, tmp_path):
        out = tmp_path / "curve.csv"
        svg = tmp_path / "curve.svg"
        assert main(["probe-crossmodal", "--ckpt", str(workspace["ckpt"]), "--vocab", str(workspace["vocab"]),
                     "--input", "x_core", "--output", "y_double",
                     "--time", "2022-06-06T09:00:00", "--out", str(out), "--plot", str(svg)]) == 0
        rows = [r for r in csv.reader(out.read_text().splitlines()) if r and not r[0].startswith("#")]
        assert rows[0] == ["input_midpoint", "expected_output"]
        assert len(rows) >= 3  # header plus one row per input bin
        assert svg.read_text().startswith("<svg")

    def test_simulate_noop_effect_zero(self, workspace, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "intervention": {"kind": "scale", "modalities": ["x_core"], "factor": 1.0, "label": "noop"},
            "outcome": "y_double",
            "horizon_months": 12,
            "seed": 4,
        }), encoding="utf-8")
        out = tmp_path / "sim.csv"
        assert main(["simulate", "--ckpt", str(workspace["ckpt"]), "--vocab", str(workspace["vocab"]),
                     "--cohort", str(workspace["cohort"]), "--spec", str(spec), "--out", str(out)]) == 0
        text = out.read_text()
        assert "# effect_percent=0" in text

    def test_simulate_malformed_spec(self, workspace, tmp_path, capsys):
        spec = tmp_path / "bad.json"
        spec.write_text("{ not json", encoding="utf-8")
        rc = main(["simulate", "--ckpt", str(workspace["ckpt"]), "--vocab", str(workspace["vocab"]),
                   "--cohort", str(workspace["cohort"]), "--spec", str(spec), "--out", str(tmp_path / "x.csv")])
        assert rc == 1
        assert "malformed JSON" in capsys.readouterr().err


class TestTrialRun:
    def test_forest_output(self, workspace, tmp_path):
        trials = tmp_path / "trials"
        trials.mkdir()
        (trials / "demo.json").write_text(json.dumps({
            "name": "demo",
            "n": 12,
            "table1": [
                {"modality": "age", "mean": 60, "sd": 5, "low": 40, "high": 80},
                {"modality": "t_target", "mean": 160, "sd": 10, "low": 100, "high": 220},
                {"modality": "x_core", "mean": 100, "sd": 8, "low": 60, "high": 140},
            ],
            "arms": [{"kind": "append", "modality": "medication", "category_index": 0,
                      "frequency": 1, "duration": 12, "label": "drug_a"}],
            "outcome": "t_target",
            "horizon_months": 12,
            "published": {"point": -20.0, "ci_low": -25.0, "ci_high": -15.0},
        }), encoding="utf-8")
        out = tmp_path / "forest.csv"
        svg = tmp_path / "forest.svg"
        assert main(["trial-run", "--ckpt", str(workspace["ckpt"]), "--vocab", str(workspace["vocab"]),
                     "--trials", str(trials), "--out", str(out), "--plot", str(svg), "--seed", "5"]) == 0
        lines = out.read_text().splitlines()
        assert any(line.startswith("# direction_hits=") for line in lines)
        rows = [r for r in csv.reader(lines) if r and not r[0].startswith("#")]
        assert rows[0][0] == "trial"
        assert rows[1][0] == "demo"
        assert svg.exists()

    def test_empty_trials_dir(self, workspace, tmp_path, capsys):
        trials = tmp_path / "empty"
        trials.mkdir()
        rc = main(["trial-run", "--ckpt", str(workspace["ckpt"]), "--vocab", str(workspace["vocab"]),
                   "--trials", str(trials), "--out", str(tmp_path / "f.csv")])
        assert rc == 1
        assert "no trial specs" in capsys.readouterr().err
