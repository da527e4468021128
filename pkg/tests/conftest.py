import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from face_manifest import load_manifest  # noqa: E402
from generate_faces import SynthConfig, face_landmarks, generate_synthetic, subject_geometry  # noqa: E402
from patch_geometry import LandmarkSet  # noqa: E402

TINY_OVERRIDES = [
    "phase1.epochs=1", "phase1.input_size=64", "phase1.batch_size=8", "phase1.n_styles=4",
    "phase2.epochs=1", "phase2.input_size=32", "phase2.batch_size=8",
    "fusion.epochs=2", "fusion.batch_size=8", "fusion.hidden=8",
    "attention.batch_size=8",
]


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthConfig(n_subjects_live=6, n_subjects_attack=6, image_size=64, seed=3), out)
    return out


@pytest.fixture(scope="session")
def manifest_path(synth_dir):
    return synth_dir / "manifest.csv"


@pytest.fixture(scope="session")
def manifest(manifest_path):
    return load_manifest(manifest_path)


@pytest.fixture
def face_landmark_set():
    geom = subject_geometry(np.random.default_rng(0))
    return LandmarkSet(face_landmarks(geom, 128), (128, 128))


@pytest.fixture(scope="session")
def full_scale_manifest_path(tmp_path_factory):
    """300 live + 300 attack subjects at 64 px, seed 7; only built for slow tests."""
    out = tmp_path_factory.mktemp("synth_full")
    generate_synthetic(SynthConfig(n_subjects_live=300, n_subjects_attack=300, image_size=64, seed=7), out)
    return out / "manifest.csv"
