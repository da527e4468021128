import numpy as np
import pandas as pd
import pytest
import torch

from checkpoints import CheckpointDir, state_checksum
from compose_folds import philox
from face_manifest import DatasetManifest, Label, load_manifest, read_planted_regions
from gradcam_attention import ATTENTION_COLUMNS
from losses import phase1_total_loss
from networks import FullFaceModel, instance_stats
from pad_errors import ManifestError, TrainingError
from pad_metrics import compute_pad_metrics
from patch_geometry import REGION_NAMES
from run_ablations import smoothed_loss_decreases
from train_config import TrainConfig, with_overrides
from train_phases import (
    PHASE1_LOG_COLUMNS, PHASE2_LOG_COLUMNS, PLANTED_QUORUM, TrainedSystem, TrainingData, attention_matrix,
    balanced_batches, extract_attention, patch_embeddings, phase1_losses, phase1_weights, planted_attention_sanity,
    predict, predict_manifest, train_fusion, train_phase1, train_phase2,
)

from conftest import TINY_OVERRIDES


@pytest.fixture(scope="module")
def cfg():
    return with_overrides(TrainConfig(), TINY_OVERRIDES)


@pytest.fixture(scope="module")
def data(manifest, cfg):
    return TrainingData(manifest, cfg.phase2.input_size)


@pytest.fixture(scope="module")
def phase1(cfg, data):
    return train_phase1(cfg, data)


@pytest.fixture(scope="module")
def attention(phase1, data, cfg):
    return extract_attention(phase1[0], data, cfg.attention.k_percent, cfg.attention.batch_size)


@pytest.fixture(scope="module")
def phase2(cfg, data):
    return train_phase2(cfg, data)


def test_balanced_batches_are_half_and_half():
    labels = np.array([0] * 3 + [1] * 13)
    batches = balanced_batches(labels, 8, philox(0, 1))
    assert len(batches) == 2
    for b in batches:
        assert len(b) == 8
        assert (labels[b] == 0).sum() == 4
    with pytest.raises(TrainingError):
        balanced_batches(np.ones(4, dtype=int), 4, philox(0, 1))


def test_phase1_weights_zero_disabled_terms(cfg):
    p1 = with_overrides(cfg, ["phase1.use_aiaw=false", "phase1.use_tf=false"]).phase1
    w = phase1_weights(p1)
    assert (w.alpha1, w.alpha2, w.beta1, w.beta2) == (0.0, 0.0, 0.0, 0.0)
    assert (w.gamma1, w.gamma2) == (1.0, 1.0)


def test_all_extras_off_is_plain_cross_entropy(cfg):
    p1 = with_overrides(cfg, ["phase1.use_csa=false", "phase1.use_aiaw=false",
                              "phase1.use_tf=false"]).phase1
    torch.manual_seed(0)
    model = FullFaceModel(input_size=64, n_styles=4)
    x = torch.rand(4, 3, 64, 64)
    y = torch.tensor([0, 1, 0, 1])
    parts, _ = phase1_losses(model, x, y, p1, philox(0, 3), torch.Generator().manual_seed(0))
    assert torch.equal(parts.ce_org, parts.ce_aug)
    total = phase1_total_loss(parts, phase1_weights(p1))
    assert total.item() == pytest.approx(2.0 * parts.ce_org.item())
    assert parts.tf_org.item() == 0.0 and parts.aiaw_aug.item() == 0.0


def test_style_bank_is_seeded_from_the_first_batch(cfg):
    p1 = with_overrides(cfg, ["phase1.n_styles=8"]).phase1
    torch.manual_seed(1)
    model = FullFaceModel(input_size=64, n_styles=8)
    assert not bool(model.style_bank.initialized)
    x = torch.rand(4, 3, 64, 64)
    y = torch.tensor([0, 1, 0, 1])
    phase1_losses(model, x, y, p1, philox(0, 3), torch.Generator().manual_seed(0), seed=5)
    assert bool(model.style_bank.initialized)

    with torch.no_grad():
        mu, _ = instance_stats(model.features(x))
    bank = model.style_bank
    for j in range(bank.n_styles):
        gaps = (mu - bank.mean[j]).abs().amax(dim=1)
        i = int(torch.argmin(gaps))
        assert gaps[i].item() < 1e-5
        assert int(y[i]) == int(bank.labels[j])

    seeded = bank.mean.clone()
    phase1_losses(model, x, y, p1, philox(0, 3), torch.Generator().manual_seed(0), seed=5)
    assert torch.equal(bank.mean, seeded)


def test_training_needs_both_classes(cfg, manifest):
    with pytest.raises(ManifestError, match="empty"):
        train_phase1(cfg, DatasetManifest([]))
    live = manifest.subset([s.sample_id for s in manifest if s.label is Label.BONA_FIDE])
    with pytest.raises(ManifestError):
        train_phase2(cfg, live)


def test_phase1_log_and_determinism(phase1, cfg, data):
    model, table = phase1
    assert list(table.columns) == PHASE1_LOG_COLUMNS
    assert len(table) == cfg.phase1.epochs
    assert np.isfinite(table.drop(columns="wall_time").to_numpy()).all()
    assert bool(model.style_bank.initialized)
    again, _ = train_phase1(cfg, data)
    assert state_checksum(again) == state_checksum(model)


def test_attention_rows(attention, data):
    assert list(attention["sample_id"]) == [s.sample_id for s in data.samples]
    values = attention_matrix(attention, data.samples)
    assert values.shape == (len(data), 7)
    assert (values >= 0).all() and (values <= 1).all()


def test_attention_does_not_touch_the_model(phase1, data, cfg):
    model = phase1[0]
    before = state_checksum(model)
    extract_attention(model, data, 60.0, cfg.attention.batch_size)
    assert state_checksum(model) == before


def test_attention_matrix_reports_missing_rows(attention, data):
    with pytest.raises(ManifestError, match="extract-attention"):
        attention_matrix(attention.iloc[1:], data.samples)


def _planted_table(samples, flipped=()):
    """0.9 on planted regions and 0.1 elsewhere; reversed for the flipped samples."""
    rows = []
    for s in samples:
        planted = set(read_planted_regions(s))
        scores = {r: 0.9 if (r in planted) != (s.sample_id in flipped) else 0.1 for r in REGION_NAMES}
        rows.append({"sample_id": s.sample_id, **scores, "k_percent": 50.0})
    return pd.DataFrame(rows, columns=ATTENTION_COLUMNS)


def test_attention_sanity_counts_planted_wins(manifest):
    attacks = [s.sample_id for s in manifest if s.label is Label.ATTACK]
    assert len(attacks) == 6

    sanity = planted_attention_sanity(_planted_table(manifest.samples), manifest.samples)
    assert (sanity.n_samples, sanity.n_hits) == (6, 6)
    assert sanity.fraction == 1.0 and sanity.passed
    assert sanity.as_dict()["k_percent"] == 50.0

    one = planted_attention_sanity(_planted_table(manifest.samples, attacks[:1]), manifest.samples)
    assert one.fraction == pytest.approx(5 / 6) and one.passed
    two = planted_attention_sanity(_planted_table(manifest.samples, attacks[:2]), manifest.samples)
    assert two.fraction == pytest.approx(4 / 6) and not two.passed
    assert two.quorum == PLANTED_QUORUM


def test_attention_sanity_needs_planted_attacks(manifest):
    live = [s for s in manifest if s.label is Label.BONA_FIDE]
    with pytest.raises(ManifestError, match="planted"):
        planted_attention_sanity(_planted_table(live), live)
    attack = next(s.sample_id for s in manifest if s.label is Label.ATTACK)
    table = _planted_table(manifest.samples)
    with pytest.raises(ManifestError, match="extract-attention"):
        planted_attention_sanity(table[table["sample_id"] != attack], manifest.samples)


def test_phase2_trains_seven_regions(phase2, cfg):
    models, table = phase2
    assert len(models) == 7
    assert list(table.columns) == PHASE2_LOG_COLUMNS
    assert list(table["region"].unique()) == list(REGION_NAMES)
    assert all(m.config["input_size"] == cfg.phase2.input_size for m in models)


def test_patch_embeddings_shapes(phase2, data):
    emb, logits = patch_embeddings(phase2[0], data.crops[:3])
    assert emb.shape == (3, 7, 16) and logits.shape == (3, 7, 2)


@pytest.mark.parametrize("mode", ["weighted_mlp", "unweighted_mlp", "majority_vote"])
def test_fusion_and_prediction(mode, cfg, phase1, phase2, attention, data, manifest, tmp_path):
    mode_cfg = with_overrides(cfg, [f"fusion.mode={mode}"])
    before = [state_checksum(m) for m in phase2[0]]
    fusion, table = train_fusion(mode_cfg, phase2[0], attention, data)
    assert [state_checksum(m) for m in phase2[0]] == before
    if mode == "majority_vote":
        assert fusion is None and table.empty
    else:
        assert len(table) == cfg.fusion.epochs

    system = TrainedSystem(phase1[0], phase2[0], fusion, mode=mode,
                           attention_k=mode_cfg.attention.k_percent, threshold=0.5)
    score, label = predict(system, manifest.samples[0])
    assert 0.0 <= score <= 1.0 and label in (0, 1)
    assert predict(system, manifest.samples[0]) == (score, label)

    scores = predict_manifest(system, manifest)
    assert [s.sample_id for s in scores] == [s.sample_id for s in manifest]
    report = compute_pad_metrics(scores)
    assert 0.0 <= report.acer <= 100.0

    ckpt = CheckpointDir(tmp_path / "ckpt")
    system.save(ckpt)
    restored = TrainedSystem.load(ckpt, mode_cfg)
    assert predict(restored, manifest.samples[0])[0] == pytest.approx(score, abs=1e-6)


def test_system_rejects_mismatched_parts(phase1, phase2):
    with pytest.raises(TrainingError):
        TrainedSystem(phase1[0], phase2[0][:6], None, mode="majority_vote")
    with pytest.raises(TrainingError):
        TrainedSystem(phase1[0], phase2[0], None, mode="weighted_mlp")


@pytest.fixture(scope="module")
def full_scale(full_scale_manifest_path):
    cfg = with_overrides(TrainConfig(), ["phase1.epochs=5"])
    manifest = load_manifest(full_scale_manifest_path)
    return cfg, manifest, train_phase1(cfg, TrainingData(manifest, cfg.phase2.input_size))


@pytest.mark.slow
def test_phase1_smoothed_loss_decreases(full_scale):
    _, _, (_, table) = full_scale
    assert smoothed_loss_decreases(table["total"], window=3, epochs=5), table["total"].tolist()


@pytest.mark.slow
def test_trained_attention_prefers_planted_regions(full_scale):
    cfg, manifest, (model, _) = full_scale
    table = extract_attention(model, manifest, cfg.attention.k_percent, cfg.attention.batch_size)
    sanity = planted_attention_sanity(table, manifest.samples)
    assert sanity.n_samples == 300
    assert sanity.fraction >= 0.8, sanity.as_dict()
