#!/usr/bin/env python3
"""
face_manifest.py
----------------
Dataset manifest ingestion.

A manifest is a UTF-8 CSV with the header

    sample_id,subject_id,label,attack_type,image,landmarks,width,height

label is `live` or `attack`, attack_type may be empty, and image/landmarks
are paths relative to the manifest file.  Each landmark sidecar holds 98
lines of `x y` in pixel coordinates of (width, height).  Images are 8-bit
RGB PNGs.

Every sample is validated eagerly on load: the image must decode to
(width, height), the sidecar must hold exactly 98 in-bounds points.
"""
import csv
import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

from pad_errors import ManifestError

log = logging.getLogger(__name__)

# ------------------------------------------------------------------ constants
MANIFEST_HEADER = [
    "sample_id", "subject_id", "label", "attack_type",
    "image", "landmarks", "width", "height",
]
NUM_LANDMARKS = 98
PLANTED_DIR = "planted"


class Label(enum.IntEnum):
    BONA_FIDE = 0
    ATTACK = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().lower()
        if key in ("live", "bona_fide", "bonafide"):
            return cls.BONA_FIDE
        if key == "attack":
            return cls.ATTACK
        raise ValueError(f"unknown label {text!r} (expected live or attack)")

    @property
    def token(self) -> str:
        return "live" if self is Label.BONA_FIDE else "attack"


@dataclass(frozen=True)
class FaceSample:
    sample_id: str
    subject_id: str
    image_path: Path
    landmark_path: Path
    label: Label
    attack_type: Optional[str]
    reference_size: Tuple[int, int]   # (width_px, height_px)

    @property
    def planted_path(self) -> Path:
        """Planted-region sidecar written by the synthetic generator."""
        return self.image_path.parent.parent / PLANTED_DIR / f"{self.sample_id}.txt"


@dataclass
class DatasetManifest:
    samples: List[FaceSample]
    name: str = "manifest"
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        seen = {}
        for i, s in enumerate(self.samples):
            if s.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {s.sample_id!r}")
            seen[s.sample_id] = i
        self._index = seen

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> FaceSample:
        return self.samples[self._index[sample_id]]

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)

    @property
    def subjects(self) -> List[str]:
        """Distinct subject ids in order of first appearance."""
        return list(dict.fromkeys(s.subject_id for s in self.samples))

    def subset(self, sample_ids: Iterable[str], name: Optional[str] = None) -> "DatasetManifest":
        keep = set(sample_ids)
        return DatasetManifest([s for s in self.samples if s.sample_id in keep],
                               name=name or self.name)

    def require_both_labels(self) -> None:
        """Training manifests need at least one sample of each label."""
        if not self.samples:
            raise ManifestError(f"manifest {self.name!r} is empty")
        present = set(int(l) for l in self.labels)
        missing = [l.token for l in Label if int(l) not in present]
        if missing:
            raise ManifestError(
                f"manifest {self.name!r} has no {'/'.join(missing)} samples; "
                "training needs both classes")


# ------------------------------------------------------------------ sidecar IO
def read_landmarks(path: Path) -> np.ndarray:
    """Read a landmark sidecar into a (98, 2) float64 array."""
    path = Path(path)
    if not path.exists():
        raise ManifestError("landmark file not found", path=path)
    points = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ManifestError(f"expected 'x y', got {line!r}", line=lineno, path=path)
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ManifestError(f"non-numeric landmark {line!r}", line=lineno, path=path)
    if len(points) != NUM_LANDMARKS:
        raise ManifestError(
            f"landmark file has {len(points)} points, expected {NUM_LANDMARKS}", path=path)
    return np.asarray(points, dtype=np.float64)


def write_landmarks(path: Path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    lines = [f"{x:.6f} {y:.6f}" for x, y in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_planted_regions(sample: FaceSample) -> List[str]:
    path = sample.planted_path
    if not path.exists():
        return []
    text = path.read_text(encoding="utf-8").strip()
    return [name for name in text.split(",") if name]


def load_image(path: Path) -> np.ndarray:
    """Decode a PNG into an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


# ------------------------------------------------------------------ validation
def _validate_sample(sample: FaceSample, line: int, manifest_path: Path) -> None:
    if not sample.image_path.exists():
        raise ManifestError(f"image not found: {sample.image_path}", line=line, path=manifest_path)
    try:
        with Image.open(sample.image_path) as im:
            size = im.size
    except OSError as exc:
        raise ManifestError(f"image does not decode: {exc}", line=line, path=manifest_path)
    if tuple(size) != tuple(sample.reference_size):
        raise ManifestError(
            f"image {sample.image_path.name} is {size[0]}x{size[1]}, "
            f"manifest says {sample.reference_size[0]}x{sample.reference_size[1]}",
            line=line, path=manifest_path)

    try:
        points = read_landmarks(sample.landmark_path)
    except ManifestError as exc:
        raise ManifestError(str(exc), line=line, path=manifest_path)
    w, h = sample.reference_size
    bad = ~((points[:, 0] >= 0) & (points[:, 0] < w) & (points[:, 1] >= 0) & (points[:, 1] < h))
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        x, y = points[idx]
        raise ManifestError(
            f"landmark {idx} at ({x:.2f}, {y:.2f}) is outside the {w}x{h} frame",
            line=line, path=manifest_path)


# ------------------------------------------------------------------ load / write
def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Parse and eagerly validate a manifest CSV; sample order equals file order."""
    path = Path(path)
    if not path.exists():
        raise ManifestError("manifest not found", path=path)
    base = path.resolve().parent
    samples: List[FaceSample] = []
    seen: Dict[str, int] = {}

    try:
        handle = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}", path=path)

    with handle as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_HEADER:
            raise ManifestError(
                f"bad header {reader.fieldnames}, expected {','.join(MANIFEST_HEADER)}",
                line=1, path=path)
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in MANIFEST_HEADER):
                raise ManifestError("wrong number of columns", line=lineno, path=path)
            sid = row["sample_id"].strip()
            if not sid:
                raise ManifestError("empty sample_id", line=lineno, path=path)
            if sid in seen:
                raise ManifestError(
                    f"duplicate sample_id {sid!r} (first seen on line {seen[sid]})",
                    line=lineno, path=path)
            seen[sid] = lineno
            try:
                label = Label.parse(row["label"])
                width, height = int(row["width"]), int(row["height"])
            except ValueError as exc:
                raise ManifestError(str(exc), line=lineno, path=path)
            if width < 1 or height < 1:
                raise ManifestError("width and height must be positive", line=lineno, path=path)

            sample = FaceSample(
                sample_id=sid,
                subject_id=row["subject_id"].strip(),
                image_path=base / row["image"].strip(),
                landmark_path=base / row["landmarks"].strip(),
                label=label,
                attack_type=row["attack_type"].strip() or None,
                reference_size=(width, height),
            )
            if validate:
                _validate_sample(sample, lineno, path)
            samples.append(sample)

    log.info("loaded %d samples from %s", len(samples), path)
    return DatasetManifest(samples, name=path.stem)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write a manifest CSV with paths relative to its own directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.resolve().parent
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            writer.writerow([
                s.sample_id,
                s.subject_id,
                s.label.token,
                s.attack_type or "",
                Path(os.path.relpath(s.image_path.resolve(), base)).as_posix(),
                Path(os.path.relpath(s.landmark_path.resolve(), base)).as_posix(),
                s.reference_size[0],
                s.reference_size[1],
            ])
    return path
