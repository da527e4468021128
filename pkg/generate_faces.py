#!/usr/bin/env python3
"""
generate_faces.py
-----------------
Procedural face generator for desk-scale training and testing.

Every subject gets a smooth cartoon face (ellipse head, eye/brow/nose/mouth
blobs placed at analytically known 98-point landmark positions, with
per-subject jitter).  Attack subjects additionally carry high-frequency
texture plus a hue shift inside `artifact_region_count` randomly chosen patch
regions.  A global colour/contrast "style" transform scaled by `style_jitter`
is applied to both classes.

Writes, under the output directory:
    images/<sample_id>.png       8-bit RGB
    landmarks/<sample_id>.txt    98 lines of `x y`
    planted/<sample_id>.txt      attack only: comma-separated region names
    manifest.csv                 see face_manifest.py

Same seed → byte-identical output.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from compose_folds import philox
from face_manifest import (DatasetManifest, FaceSample, Label, PLANTED_DIR,
                           write_landmarks, write_manifest)
from pad_errors import PadError
from patch_geometry import REGION_NAMES, LandmarkSet, derive_patch_regions

log = logging.getLogger(__name__)

# ------------------------------------------------------------------ attribute pools
SKIN_TONES = np.array([
    [0.96, 0.80, 0.69], [0.89, 0.69, 0.56], [0.78, 0.57, 0.42],
    [0.63, 0.44, 0.31], [0.45, 0.31, 0.22], [0.98, 0.87, 0.78],
])
BACKGROUNDS = np.array([
    [0.30, 0.35, 0.40], [0.55, 0.55, 0.52], [0.20, 0.22, 0.25],
    [0.70, 0.72, 0.75], [0.40, 0.30, 0.28],
])
BROW_COLOR = np.array([0.20, 0.14, 0.10])
LIP_COLOR = np.array([0.72, 0.32, 0.32])
SCLERA = np.array([0.95, 0.95, 0.95])
IRIS = np.array([0.15, 0.12, 0.10])

# texture amplitude, stripe mix, hue shift, saturation gain
ATTACK_TYPES = {
    "cosmetic": (0.14, 0.0, 0.07, 1.25),
    "latex":    (0.12, 0.6, 0.04, 0.85),
    "silicone": (0.18, 0.3, 0.10, 1.10),
}


class SynthOptions(BaseModel):
    """Generator settings other than the seed; the `[synth]` config section."""
    model_config = ConfigDict(extra="forbid")

    n_subjects_live: int = Field(300, ge=1)
    n_subjects_attack: int = Field(300, ge=1)
    image_size: int = Field(64, ge=64)
    artifact_region_count: int = Field(2, ge=1, le=7)
    style_jitter: float = Field(0.3, ge=0.0, le=1.0)
    images_per_subject: int = Field(1, ge=1)


class SynthConfig(SynthOptions):
    seed: int = Field(7, ge=0, lt=2**64)


# ------------------------------------------------------------------ geometry
@dataclass(frozen=True)
class FaceGeometry:
    center: Tuple[float, float]
    axes: Tuple[float, float]
    eye_y: float
    eye_dx: float
    eye_size: Tuple[float, float]
    brow_gap: float
    nose_tip_y: float
    nose_width: float
    mouth: Tuple[float, float]
    mouth_size: Tuple[float, float]
    skin: Tuple[float, float, float]
    background: Tuple[float, float, float]

    def shifted(self, dx: float, dy: float) -> "FaceGeometry":
        cx, cy = self.center
        mx, my = self.mouth
        return FaceGeometry(
            center=(cx + dx, cy + dy), axes=self.axes, eye_y=self.eye_y + dy, eye_dx=self.eye_dx,
            eye_size=self.eye_size, brow_gap=self.brow_gap, nose_tip_y=self.nose_tip_y + dy,
            nose_width=self.nose_width, mouth=(mx + dx, my + dy), mouth_size=self.mouth_size,
            skin=self.skin, background=self.background)


def subject_geometry(rng: np.random.Generator) -> FaceGeometry:
    """Per-subject face layout in unit coordinates."""
    j = lambda s: float(rng.uniform(-s, s))
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))] + rng.uniform(-0.03, 0.03, 3)
    bg = BACKGROUNDS[rng.integers(len(BACKGROUNDS))] + rng.uniform(-0.05, 0.05, 3)
    return FaceGeometry(
        center=(0.5 + j(0.015), 0.52 + j(0.01)),
        axes=(0.35 + j(0.02), 0.43 + j(0.01)),
        eye_y=0.42 + j(0.015),
        eye_dx=0.14 + j(0.01),
        eye_size=(0.06 + j(0.008), 0.026 + j(0.004)),
        brow_gap=0.075 + j(0.01),
        nose_tip_y=0.59 + j(0.015),
        nose_width=0.055 + j(0.008),
        mouth=(0.5 + j(0.01), 0.73 + j(0.015)),
        mouth_size=(0.10 + j(0.012), 0.035 + j(0.006)),
        skin=tuple(np.clip(skin, 0, 1)),
        background=tuple(np.clip(bg, 0, 1)),
    )


def _ellipse_points(cx, cy, a, b, n, start=np.pi):
    t = start + 2 * np.pi * np.arange(n) / n
    return np.stack([cx + a * np.cos(t), cy + b * np.sin(t)], axis=1)


def face_landmarks(g: FaceGeometry, size: int) -> np.ndarray:
    """98 WFLW-ordered landmarks in pixel coordinates."""
    cx, cy = g.center
    a, b = g.axes
    pts = np.zeros((98, 2))

    # lower arc of the head ellipse, temple to temple; index 16 lands on the chin
    t = np.linspace(np.pi - 0.25, 2 * np.pi + 0.25, 33)
    pts[0:33] = np.stack([cx + a * np.cos(t), cy - b * np.sin(t)], axis=1)

    for start, side in ((33, -1), (42, 1)):
        ex = cx + side * g.eye_dx
        by = g.eye_y - g.brow_gap
        xs_up = np.linspace(ex - 0.085, ex + 0.085, 5)
        ys_up = by - 0.018 * np.sin(np.linspace(0, np.pi, 5))
        xs_lo = np.linspace(ex + 0.07, ex - 0.07, 4)
        ys_lo = by + 0.012 - 0.010 * np.sin(np.linspace(0.3, np.pi - 0.3, 4))
        pts[start:start + 5] = np.stack([xs_up, ys_up], axis=1)
        pts[start + 5:start + 9] = np.stack([xs_lo, ys_lo], axis=1)

    bridge_y = np.linspace(g.eye_y, g.nose_tip_y, 4)
    pts[51:55] = np.stack([np.full(4, cx), bridge_y], axis=1)
    wing_t = np.linspace(np.pi, 0, 5)
    pts[55:60] = np.stack([cx + g.nose_width * np.cos(wing_t),
                           g.nose_tip_y + 0.025 + 0.008 * np.sin(wing_t)], axis=1)

    ea, eb = g.eye_size
    pts[60:68] = _ellipse_points(cx - g.eye_dx, g.eye_y, ea, eb, 8)
    pts[68:76] = _ellipse_points(cx + g.eye_dx, g.eye_y, ea, eb, 8)

    mx, my = g.mouth
    ma, mb = g.mouth_size
    pts[76:88] = _ellipse_points(mx, my, ma, mb, 12)
    pts[88:96] = _ellipse_points(mx, my, 0.7 * ma, 0.4 * mb, 8)
    pts[96] = (cx - g.eye_dx, g.eye_y)
    pts[97] = (cx + g.eye_dx, g.eye_y)

    pts = pts * size
    return np.clip(pts, 0.0, size - 1e-3)


def _soft_ellipse(xx, yy, cx, cy, a, b, sharpness=25.0):
    r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * sharpness, -50, 50)))


def _blend(img, mask, color):
    return img * (1.0 - mask[..., None]) + np.asarray(color)[None, None, :] * mask[..., None]


def render_face(g: FaceGeometry, size: int) -> np.ndarray:
    """Smooth, artifact-free face as float (H, W, 3) in [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size]
    xx = (xs + 0.5) / size
    yy = (ys + 0.5) / size
    cx, cy = g.center
    a, b = g.axes

    img = np.broadcast_to(np.asarray(g.background), (size, size, 3)).copy()
    shade = 1.0 - 0.12 * (yy - cy) / b
    skin = np.asarray(g.skin)[None, None, :] * shade[..., None]
    head = _soft_ellipse(xx, yy, cx, cy, a, b)[..., None]
    img = img * (1 - head) + np.clip(skin, 0, 1) * head

    ea, eb = g.eye_size
    for side in (-1, 1):
        ex = cx + side * g.eye_dx
        img = _blend(img, _soft_ellipse(xx, yy, ex, g.eye_y, ea, eb, 12.0), SCLERA)
        img = _blend(img, _soft_ellipse(xx, yy, ex, g.eye_y, 0.45 * eb + 0.01, 0.9 * eb, 10.0), IRIS)
        brow = _soft_ellipse(xx, yy, ex, g.eye_y - g.brow_gap, 0.085, 0.012, 8.0)
        img = _blend(img, 0.85 * brow, BROW_COLOR)

    nostril = _soft_ellipse(xx, yy, cx, g.nose_tip_y + 0.02, g.nose_width, 0.015, 6.0)
    img = _blend(img, 0.35 * nostril, np.asarray(g.skin) * 0.55)
    mx, my = g.mouth
    ma, mb = g.mouth_size
    img = _blend(img, _soft_ellipse(xx, yy, mx, my, ma, mb, 10.0), LIP_COLOR)
    return np.clip(img, 0.0, 1.0)


# ------------------------------------------------------------------ artifacts and style
def plant_artifacts(img: np.ndarray, boxes: List[Tuple[int, int, int, int]], attack_type: str,
                    rng: np.random.Generator) -> np.ndarray:
    """High-frequency texture plus hue shift, strictly inside each box."""
    amp, stripe_mix, hue_shift, sat_gain = ATTACK_TYPES[attack_type]
    out = img.copy()
    for x0, y0, x1, y1 in boxes:
        patch = out[y0:y1, x0:x1]
        hsv = rgb_to_hsv(np.clip(patch, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * sat_gain + 0.05, 0, 1)
        shifted = hsv_to_rgb(hsv)
        h, w = patch.shape[:2]
        noise = rng.uniform(-1.0, 1.0, size=(h, w, 1))
        yy, xx = np.mgrid[0:h, 0:w]
        stripes = np.where((xx + yy) % 2 == 0, 1.0, -1.0)[..., None]
        texture = amp * ((1 - stripe_mix) * noise + stripe_mix * stripes)
        out[y0:y1, x0:x1] = shifted + texture
    return out


@dataclass(frozen=True)
class StyleTransform:
    gain: np.ndarray   # (3,)
    bias: np.ndarray   # (3,)

    def apply(self, img: np.ndarray) -> np.ndarray:
        return img * self.gain[None, None, :] + self.bias[None, None, :]

    def invert(self, img: np.ndarray) -> np.ndarray:
        return (img - self.bias[None, None, :]) / self.gain[None, None, :]


def sample_style(rng: np.random.Generator, jitter: float) -> StyleTransform:
    contrast = 1.0 + jitter * rng.uniform(-0.4, 0.4)
    channel = 1.0 + jitter * rng.uniform(-0.25, 0.25, 3)
    brightness = jitter * rng.uniform(-0.15, 0.15)
    gain = contrast * channel
    bias = 0.5 * (1.0 - contrast) * channel + brightness
    return StyleTransform(gain=gain, bias=bias)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# ------------------------------------------------------------------ sample rendering
@dataclass
class SynthSample:
    sample_id: str
    subject_id: str
    label: Label
    attack_type: Optional[str]
    landmarks: np.ndarray
    clean: np.ndarray            # styled, artifact-free float image (pre-quantization)
    image: np.ndarray            # styled float image actually written (pre-quantization)
    style: StyleTransform
    planted: List[str]
    planted_boxes: List[Tuple[int, int, int, int]]


def render_sample(config: SynthConfig, subject_index: int, image_index: int) -> SynthSample:
    """Render one image; subjects [0, n_live) are live, the rest attack."""
    size = config.image_size
    is_attack = subject_index >= config.n_subjects_live
    geom = subject_geometry(philox(config.seed, stream=1 + subject_index))
    rng = philox(config.seed, stream=(1 << 32) + subject_index * 4096 + image_index)

    if image_index > 0:
        geom = geom.shifted(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(-0.015, 0.015)))
    landmarks = face_landmarks(geom, size)
    base = render_face(geom, size)
    style = sample_style(rng, config.style_jitter)

    planted, boxes, attack_type = [], [], None
    body = base
    if is_attack:
        attack_type = list(ATTACK_TYPES)[subject_index % len(ATTACK_TYPES)]
        patches = derive_patch_regions(LandmarkSet(landmarks, (size, size)))
        chosen = np.sort(rng.choice(len(REGION_NAMES), size=config.artifact_region_count, replace=False))
        planted = [REGION_NAMES[i] for i in chosen]
        boxes = [patches[name].box for name in planted]
        body = plant_artifacts(base, boxes, attack_type, rng)

    prefix = "att" if is_attack else "live"
    return SynthSample(
        sample_id=f"{prefix}_{subject_index:05d}_{image_index:02d}",
        subject_id=f"s{subject_index:05d}",
        label=Label.ATTACK if is_attack else Label.BONA_FIDE,
        attack_type=attack_type,
        landmarks=landmarks,
        clean=style.apply(base),
        image=style.apply(body),
        style=style,
        planted=planted,
        planted_boxes=boxes,
    )


# ------------------------------------------------------------------ main entry
def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    try:
        for sub in ("images", "landmarks", PLANTED_DIR):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PadError(f"cannot write to {out_dir}: {exc}") from exc

    n_subjects = config.n_subjects_live + config.n_subjects_attack
    size = config.image_size
    samples: List[FaceSample] = []
    jobs = [(s, i) for s in range(n_subjects) for i in range(config.images_per_subject)]

    for subject_index, image_index in tqdm(jobs, desc="synth", leave=False):
        synth = render_sample(config, subject_index, image_index)
        image_path = out_dir / "images" / f"{synth.sample_id}.png"
        lm_path = out_dir / "landmarks" / f"{synth.sample_id}.txt"
        try:
            Image.fromarray(to_uint8(synth.image), mode="RGB").save(image_path)
            write_landmarks(lm_path, synth.landmarks)
            if synth.label is Label.ATTACK:
                (out_dir / PLANTED_DIR / f"{synth.sample_id}.txt").write_text(
                    ",".join(synth.planted) + "\n", encoding="utf-8")
        except OSError as exc:
            raise PadError(f"cannot write sample {synth.sample_id}: {exc}") from exc
        samples.append(FaceSample(
            sample_id=synth.sample_id,
            subject_id=synth.subject_id,
            image_path=image_path,
            landmark_path=lm_path,
            label=synth.label,
            attack_type=synth.attack_type,
            reference_size=(size, size),
        ))

    manifest = DatasetManifest(samples, name="synthetic")
    write_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "synth_config.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")
    log.info("synthesised %d samples into %s", len(samples), out_dir)
    return manifest


if __name__ == "__main__":
    cfg = SynthConfig()
    m = generate_synthetic(cfg, "outputs/synthetic")
    n_attack = int(m.labels.sum())
    print(f"Generated {len(m)} faces → outputs/synthetic")
    print(f" • Live  : {len(m) - n_attack}")
    print(f" • Attack: {n_attack}")
