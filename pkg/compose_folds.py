#!/usr/bin/env python3
"""
compose_folds.py
----------------
Subject-disjoint partitions of a manifest.

• k folds: subjects shuffled once, sliced into k near-equal groups,
  fold i tests on group i and trains on the rest
• holdout: the 80/20 subject split used for ablation runs

Shuffling uses numpy's Philox counter-based generator keyed by the seed, so
the same (manifest, seed) always yields the same partition.

Output (when run as a script)
------
<out>/fold_<i>/train.csv, <out>/fold_<i>/test.csv   – per-fold manifests
"""
import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np

from face_manifest import DatasetManifest, load_manifest, write_manifest
from pad_errors import ManifestError

log = logging.getLogger(__name__)

# ------------------------------------------------ constants
DEFAULT_FOLDS = 5
DEFAULT_TEST_FRACTION = 0.2
SEED = 42


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; `stream` selects a disjoint counter block."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, 0, 0, int(stream)])
    return np.random.Generator(bitgen)


def _shuffled_subjects(manifest: DatasetManifest, seed: int) -> List[str]:
    subjects = sorted(manifest.subjects)
    order = philox(seed).permutation(len(subjects))
    return [subjects[i] for i in order]


def _split_by_subjects(manifest: DatasetManifest, test_subjects, name: str
                       ) -> Tuple[DatasetManifest, DatasetManifest]:
    test_subjects = set(test_subjects)
    train_ids = [s.sample_id for s in manifest if s.subject_id not in test_subjects]
    test_ids = [s.sample_id for s in manifest if s.subject_id in test_subjects]
    return (manifest.subset(train_ids, name=f"{name}_train"),
            manifest.subset(test_ids, name=f"{name}_test"))


def kfold_subject_split(manifest: DatasetManifest, k: int = DEFAULT_FOLDS, seed: int = SEED
                        ) -> List[Tuple[DatasetManifest, DatasetManifest]]:
    if k < 2:
        raise ManifestError(f"k must be at least 2, got {k}")
    subjects = _shuffled_subjects(manifest, seed)
    if len(subjects) < k:
        raise ManifestError(f"k={k} exceeds the number of distinct subjects ({len(subjects)})")

    groups = np.array_split(np.arange(len(subjects)), k)
    folds = []
    for i, idx in enumerate(groups):
        fold_subjects = [subjects[j] for j in idx]
        folds.append(_split_by_subjects(manifest, fold_subjects, f"fold{i}"))
    log.info("split %d subjects into %d folds (seed=%d)", len(subjects), k, seed)
    return folds


def holdout_subject_split(manifest: DatasetManifest, test_fraction: float = DEFAULT_TEST_FRACTION,
                          seed: int = SEED) -> Tuple[DatasetManifest, DatasetManifest]:
    """Stratified by label: each class contributes test_fraction of its subjects."""
    if not 0.0 < test_fraction < 1.0:
        raise ManifestError(f"test_fraction must be in (0, 1), got {test_fraction}")
    subjects = _shuffled_subjects(manifest, seed)
    subject_label = {}
    for s in manifest:
        subject_label.setdefault(s.subject_id, int(s.label))

    test = []
    for label in sorted(set(subject_label.values())):
        pool = [sub for sub in subjects if subject_label[sub] == label]
        n_test = int(round(test_fraction * len(pool)))
        n_test = min(max(n_test, 1), len(pool) - 1) if len(pool) > 1 else 0
        test.extend(pool[:n_test])
    if not test:
        raise ManifestError("not enough subjects for a holdout split")
    return _split_by_subjects(manifest, test, "holdout")


def write_folds(folds, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    written = []
    for i, (train, test) in enumerate(folds):
        fold_dir = out_dir / f"fold_{i}"
        written.append(write_manifest(train, fold_dir / "train.csv"))
        written.append(write_manifest(test, fold_dir / "test.csv"))
    return written


def main(manifest_path: str, out_dir: str, k: int = DEFAULT_FOLDS, seed: int = SEED):
    manifest = load_manifest(manifest_path)
    folds = kfold_subject_split(manifest, k, seed)
    write_folds(folds, Path(out_dir))
    print(f"✅ Saved {len(folds)} subject-disjoint folds → {out_dir}")


if __name__ == "__main__":
    import sys
    main(sys.argv[1], sys.argv[2])
