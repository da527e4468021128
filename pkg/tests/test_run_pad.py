import json

import pytest

from face_manifest import Label, load_manifest
from pad_metrics import ScoredSample, write_scores
from run_pad import run

from conftest import TINY_OVERRIDES


def _sets(overrides):
    args = []
    for item in overrides:
        args += ["--set", item]
    return args


def test_help_lists_config_overrides(capsys):
    assert run(["train-phase1", "--help"]) == 0
    out = capsys.readouterr().out
    assert "phase1.epochs=30" in out
    assert "--seed" in out


def test_synth_writes_a_manifest(tmp_path, capsys):
    out = tmp_path / "synth"
    assert run(["synth", "--out", str(out), "--n-live", "2", "--n-attack", "3", "--seed", "1"]) == 0
    manifest = load_manifest(out / "manifest.csv")
    assert len(manifest) == 5
    assert int(manifest.labels.sum()) == 3
    assert "✅" in capsys.readouterr().out


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run(["synth"]) == 1
    assert run(["no-such-command"]) == 1
    assert run(["evaluate"]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_one(manifest_path, tmp_path, capsys):
    code = run(["split", "--manifest", str(manifest_path), "--out", str(tmp_path),
                "--set", "phase1.bogus=1"])
    assert code == 1
    assert "phase1" in capsys.readouterr().err


def test_missing_manifest_exits_one(tmp_path):
    assert run(["split", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1


def test_missing_checkpoint_exits_two(manifest_path, tmp_path, capsys):
    code = run(["predict", "--manifest", str(manifest_path), "--ckpt", str(tmp_path / "empty")])
    assert code == 2
    assert "phase1.ckpt" in capsys.readouterr().err


def test_split_folds(manifest_path, tmp_path):
    assert run(["split", "--manifest", str(manifest_path), "--out", str(tmp_path), "--folds", "3"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["fold_0", "fold_1", "fold_2"]
    assert run(["split", "--manifest", str(manifest_path), "--out", str(tmp_path / "h"), "--holdout"]) == 0
    assert (tmp_path / "h" / "test.csv").exists()


def test_evaluate_separable_scores(tmp_path):
    scores = [ScoredSample(f"l{i}", Label.BONA_FIDE, None, 0.1 * i) for i in range(4)]
    scores += [ScoredSample(f"a{i}", Label.ATTACK, "latex", 0.6 + 0.1 * i) for i in range(4)]
    path = write_scores(scores, tmp_path / "scores.csv")
    out = tmp_path / "report.json"
    assert run(["evaluate", "--scores", str(path), "--out", str(out)]) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["acer"] == 0.0 and report["eer"] == 0.0
    assert (tmp_path / "report.md").exists()


def test_full_workflow(manifest_path, tmp_path):
    ckpt = tmp_path / "ckpt"
    m = str(manifest_path)
    tiny = _sets(TINY_OVERRIDES)
    assert run(["train-phase1", "--train", m, "--ckpt", str(ckpt), "--seed", "3", *tiny]) == 0
    for name in ("phase1.ckpt", "norm_stats.txt", "config_snapshot", "phase1_log.csv"):
        assert (ckpt / name).exists()
    assert run(["extract-attention", "--manifest", m, "--ckpt", str(ckpt)]) == 0
    assert run(["train-phase2", "--train", m, "--ckpt", str(ckpt)]) == 0
    assert run(["train-fusion", "--train", m, "--ckpt", str(ckpt)]) == 0
    assert (ckpt / "fusion.ckpt").exists()
    assert run(["predict", "--manifest", m, "--ckpt", str(ckpt)]) == 0
    out = tmp_path / "report.json"
    assert run(["evaluate", "--scores", str(ckpt / "scores.csv"), "--out", str(out)]) == 0
    assert 0.0 <= json.loads(out.read_text(encoding="utf-8"))["acer"] <= 100.0

    assert run(["train-fusion", "--train", m, "--ckpt", str(ckpt), "--fusion-mode", "majority_vote"]) == 0
    assert not (ckpt / "fusion.ckpt").exists()
    assert run(["predict", "--manifest", m, "--ckpt", str(ckpt), "--out", str(tmp_path / "mv.csv")]) == 0
    assert (tmp_path / "mv.csv").exists()

    assert run(["visualize", "--manifest", m, "--ckpt", str(ckpt), "--out", str(tmp_path / "viz"),
                "--limit", "2", "--logs"]) == 0
    assert (tmp_path / "viz" / "phase1_loss.png").exists()


def test_synth_reads_config_and_overrides(tmp_path):
    ini = tmp_path / "synth.ini"
    ini.write_text("[run]\nseed = 4\n\n[synth]\nn_subjects_live = 2\nn_subjects_attack = 2\n"
                   "style_jitter = 0.0\n", encoding="utf-8")
    out = tmp_path / "a"
    assert run(["synth", "--out", str(out), "--config", str(ini)]) == 0
    assert len(load_manifest(out / "manifest.csv")) == 4
    written = json.loads((out / "synth_config.json").read_text(encoding="utf-8"))
    assert written["style_jitter"] == 0.0 and written["seed"] == 4

    out = tmp_path / "b"
    assert run(["synth", "--out", str(out), "--config", str(ini), "--set", "synth.style_jitter=0.1",
                "--set", "synth.artifact_region_count=3", "--n-attack", "3"]) == 0
    written = json.loads((out / "synth_config.json").read_text(encoding="utf-8"))
    assert written["style_jitter"] == 0.1 and written["artifact_region_count"] == 3
    assert written["n_subjects_attack"] == 3
    assert run(["synth", "--out", str(out), "--style-jitter", "0.6"]) == 0
    assert json.loads((out / "synth_config.json").read_text(encoding="utf-8"))["style_jitter"] == 0.6


def test_synth_rejects_bad_keys(tmp_path):
    assert run(["synth", "--out", str(tmp_path), "--set", "synth.bogus=1"]) == 1
    assert run(["synth", "--out", str(tmp_path), "--style-jitter", "2"]) == 1


def _train_and_score(m, ckpt, seed):
    tiny = _sets(TINY_OVERRIDES)
    for stage in ("train-phase1", "train-phase2", "train-fusion"):
        args = [stage, "--train", m, "--ckpt", str(ckpt), *tiny]
        if stage == "train-phase1":
            args += ["--seed", str(seed)]
        assert run(args) == 0
        if stage == "train-phase1":
            assert run(["extract-attention", "--manifest", m, "--ckpt", str(ckpt)]) == 0
    assert run(["predict", "--manifest", m, "--ckpt", str(ckpt)]) == 0
    out = ckpt / "report.json"
    assert run(["evaluate", "--scores", str(ckpt / "scores.csv"), "--out", str(out),
                "--attention", str(ckpt / "attention.csv"), "--manifest", m]) == 0
    return out.read_bytes()


def test_same_seed_gives_identical_report(manifest_path, tmp_path):
    m = str(manifest_path)
    first = _train_and_score(m, tmp_path / "one", seed=11)
    second = _train_and_score(m, tmp_path / "two", seed=11)
    assert first == second
    doc = json.loads(first)
    assert doc["attention_sanity"]["n_samples"] == 6
    assert "## Attention sanity" in (tmp_path / "one" / "report.md").read_text(encoding="utf-8")


def test_evaluate_needs_attention_and_manifest_together(tmp_path):
    scores = [ScoredSample(f"l{i}", Label.BONA_FIDE, None, 0.1) for i in range(2)]
    scores += [ScoredSample(f"a{i}", Label.ATTACK, "latex", 0.9) for i in range(2)]
    path = write_scores(scores, tmp_path / "scores.csv")
    assert run(["evaluate", "--scores", str(path), "--attention", str(tmp_path / "a.csv")]) == 1
