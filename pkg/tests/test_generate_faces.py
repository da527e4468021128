import numpy as np

from face_manifest import Label, load_image, read_landmarks, read_planted_regions
from generate_faces import SynthConfig, generate_synthetic, plant_artifacts, render_sample, sample_style
from patch_geometry import REGION_NAMES, LandmarkSet


def test_render_is_deterministic():
    cfg = SynthConfig(n_subjects_live=2, n_subjects_attack=2, seed=9)
    a = render_sample(cfg, 3, 0)
    b = render_sample(cfg, 3, 0)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.landmarks, b.landmarks)
    assert a.planted == b.planted


def test_live_and_attack_subjects():
    cfg = SynthConfig(n_subjects_live=2, n_subjects_attack=2, seed=1)
    live = render_sample(cfg, 0, 0)
    attack = render_sample(cfg, 2, 0)
    assert live.label is Label.BONA_FIDE and live.planted == []
    assert attack.label is Label.ATTACK and attack.attack_type is not None
    assert len(attack.planted) == cfg.artifact_region_count
    assert set(attack.planted) <= set(REGION_NAMES)


def test_artifacts_stay_inside_planted_boxes():
    cfg = SynthConfig(n_subjects_live=1, n_subjects_attack=1, seed=4)
    s = render_sample(cfg, 1, 0)
    outside = np.ones(s.image.shape[:2], dtype=bool)
    for x0, y0, x1, y1 in s.planted_boxes:
        outside[y0:y1, x0:x1] = False
    np.testing.assert_allclose(s.image[outside], s.clean[outside], atol=1e-12)
    assert not np.allclose(s.image[~outside], s.clean[~outside])


def test_landmarks_are_in_frame():
    cfg = SynthConfig(n_subjects_live=1, n_subjects_attack=1, image_size=96, seed=2)
    for subject in range(2):
        s = render_sample(cfg, subject, 0)
        assert LandmarkSet(s.landmarks, (96, 96)).in_bounds()


def test_style_transform_inverts():
    style = sample_style(np.random.default_rng(0), 0.3)
    img = np.random.default_rng(1).uniform(0, 1, size=(8, 8, 3))
    np.testing.assert_allclose(style.invert(style.apply(img)), img, atol=1e-12)


def test_plant_artifacts_leaves_outside_untouched():
    img = np.full((32, 32, 3), 0.5)
    out = plant_artifacts(img, [(4, 4, 12, 12)], "latex", np.random.default_rng(0))
    np.testing.assert_array_equal(out[20:, 20:], img[20:, 20:])
    assert not np.allclose(out[4:12, 4:12], 0.5)


def test_generated_files(manifest):
    s = manifest.samples[0]
    assert load_image(s.image_path).shape == (64, 64, 3)
    assert read_landmarks(s.landmark_path).shape == (98, 2)


def test_same_seed_writes_identical_files(tmp_path):
    cfg = SynthConfig(n_subjects_live=1, n_subjects_attack=2, artifact_region_count=7, seed=1)
    generate_synthetic(cfg, tmp_path / "a")
    m = generate_synthetic(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for s in m:
        name = s.image_path.name
        assert (tmp_path / "a" / "images" / name).read_bytes() == (tmp_path / "b" / "images" / name).read_bytes()
        if s.label is Label.ATTACK:
            assert len(read_planted_regions(s)) == 7
