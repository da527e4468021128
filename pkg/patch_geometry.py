"""
patch_geometry.py
-----------------
Landmark rescaling and the seven facial patch regions.

Landmarks follow the 98-point WFLW layout:

    contour 0-32 (chin 16), eyebrows 33-50, nose 51-59 (tip 54, wings 55/59),
    eyes 60-67 / 68-75, mouth 76-95, pupils 96 / 97

"left" and "right" are image-left and image-right.  Boxes are axis-aligned,
integer, half-open (x0, y0, x1, y1) and always at least 8x8 inside the frame.
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from pad_errors import GeometryError

# ------------------------------------------------------------------ landmark groups
CONTOUR = list(range(0, 33))
LEFT_CONTOUR = list(range(0, 17))
RIGHT_CONTOUR = list(range(16, 33))
CHIN = 16
EYEBROWS = list(range(33, 51))
NOSE = list(range(51, 60))
NOSE_TIP = 54
NOSE_WING_LEFT = 55
NOSE_WING_RIGHT = 59
LEFT_EYE = list(range(60, 68)) + [96]
RIGHT_EYE = list(range(68, 76)) + [97]
MOUTH = list(range(76, 96))
NUM_POINTS = 98

REGION_NAMES = (
    "forehead", "left_eye", "right_eye", "left_cheek", "nose", "right_cheek", "mouth_chin",
)
PAD_FRACTION = 0.15
FOREHEAD_EXTENT = 0.6
MIN_BOX = 8
CLAMP_EPS = 1e-6


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray                 # (98, 2) pixel coordinates
    frame_size: Tuple[int, int]        # (width_px, height_px)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_POINTS, 2):
            raise GeometryError(f"expected {NUM_POINTS} landmarks, got array of shape {pts.shape}")
        w, h = self.frame_size
        if w < 1 or h < 1:
            raise GeometryError(f"bad frame size {self.frame_size}")
        if not np.isfinite(pts).all():
            raise GeometryError("landmarks contain non-finite values")
        object.__setattr__(self, "points", pts)

    def in_bounds(self) -> bool:
        w, h = self.frame_size
        x, y = self.points[:, 0], self.points[:, 1]
        return bool(((x >= 0) & (x < w) & (y >= 0) & (y < h)).all())


@dataclass(frozen=True)
class PatchRegion:
    name: str
    box: Tuple[int, int, int, int]

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class PatchSet:
    regions: Tuple[PatchRegion, ...]
    frame_size: Tuple[int, int]

    def __post_init__(self):
        names = tuple(r.name for r in self.regions)
        if names != REGION_NAMES:
            raise GeometryError(f"regions must be in canonical order {REGION_NAMES}, got {names}")

    def __getitem__(self, name: str) -> PatchRegion:
        return self.regions[REGION_NAMES.index(name)]

    def __iter__(self):
        return iter(self.regions)

    def boxes(self) -> np.ndarray:
        return np.array([r.box for r in self.regions], dtype=np.int64)

    def to_dict(self) -> Dict:
        return {
            "frame_size": list(self.frame_size),
            "regions": [{"name": r.name, "box": list(r.box)} for r in self.regions],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PatchSet":
        regions = tuple(PatchRegion(r["name"], tuple(int(v) for v in r["box"]))
                        for r in data["regions"])
        return cls(regions, tuple(data["frame_size"]))


# ------------------------------------------------------------------ rescaling
def rescale_landmarks(lm: LandmarkSet, target: Tuple[int, int]) -> LandmarkSet:
    """Map landmarks from lm.frame_size onto a resized (W, H) frame."""
    W, H = int(target[0]), int(target[1])
    if W < 1 or H < 1:
        raise GeometryError(f"target size must be positive, got {target}")
    main_width, main_height = lm.frame_size
    scale_width = W / main_width
    scale_height = H / main_height
    pts = lm.points * np.array([scale_width, scale_height])
    pts[:, 0] = np.clip(pts[:, 0], 0.0, W - CLAMP_EPS)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, H - CLAMP_EPS)
    return LandmarkSet(pts, (W, H))


# ------------------------------------------------------------------ region rules
def _bbox(points: np.ndarray) -> Tuple[float, float, float, float]:
    return (float(points[:, 0].min()), float(points[:, 1].min()),
            float(points[:, 0].max()), float(points[:, 1].max()))


def _pad(box, fraction: float = PAD_FRACTION):
    x0, y0, x1, y1 = box
    pad = fraction * math.hypot(x1 - x0, y1 - y0)
    return x0 - pad, y0 - pad, x1 + pad, y1 + pad


def _expand_axis(lo: int, hi: int, limit: int) -> Tuple[int, int]:
    lo = min(max(0, lo), limit)
    hi = max(min(limit, hi), lo)
    if hi - lo >= MIN_BOX:
        return lo, hi
    if limit <= MIN_BOX:
        return 0, limit
    need = MIN_BOX - (hi - lo)
    lo -= need // 2
    hi += need - need // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > limit:
        lo -= hi - limit
        hi = limit
    return lo, hi


def _finalize(name: str, box, frame_size) -> PatchRegion:
    x0, y0, x1, y1 = box
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    w, h = frame_size
    ix0, ix1 = _expand_axis(math.floor(x0), math.ceil(x1), w)
    iy0, iy1 = _expand_axis(math.floor(y0), math.ceil(y1), h)
    return PatchRegion(name, (ix0, iy0, ix1, iy1))


def _contour_x_in_band(points: np.ndarray, idx: Sequence[int], y0: float, y1: float) -> float:
    contour = points[idx]
    lo, hi = min(y0, y1), max(y0, y1)
    inside = contour[(contour[:, 1] >= lo) & (contour[:, 1] <= hi)]
    if len(inside):
        return float(inside[:, 0].mean())
    nearest = np.argmin(np.abs(contour[:, 1] - 0.5 * (lo + hi)))
    return float(contour[nearest, 0])


def _check_degenerate(points: np.ndarray) -> None:
    centered = points - points.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-6) < 2:
        raise GeometryError("degenerate landmarks: all points are collinear or coincident")


def derive_patch_regions(lm: LandmarkSet) -> PatchSet:
    pts = lm.points
    _check_degenerate(pts)

    brow_x0, brow_top, brow_x1, _ = _bbox(pts[EYEBROWS])
    nose_tip_y = pts[NOSE_TIP, 1]
    forehead = (brow_x0, brow_top - FOREHEAD_EXTENT * (nose_tip_y - brow_top), brow_x1, brow_top)

    left_eye = _pad(_bbox(pts[LEFT_EYE]))
    right_eye = _pad(_bbox(pts[RIGHT_EYE]))
    nose = _pad(_bbox(pts[NOSE]))

    mx0, my0, mx1, my1 = _pad(_bbox(pts[MOUTH]))
    mouth_chin = (mx0, my0, mx1, max(my1, pts[CHIN, 1]))

    mouth_top = pts[MOUTH, 1].min()
    left_band = (pts[LEFT_EYE, 1].max(), mouth_top)
    right_band = (pts[RIGHT_EYE, 1].max(), mouth_top)
    left_cheek = (_contour_x_in_band(pts, LEFT_CONTOUR, *left_band), left_band[0],
                  pts[NOSE_WING_LEFT, 0], left_band[1])
    right_cheek = (pts[NOSE_WING_RIGHT, 0], right_band[0],
                   _contour_x_in_band(pts, RIGHT_CONTOUR, *right_band), right_band[1])

    raw = dict(forehead=forehead, left_eye=left_eye, right_eye=right_eye,
               left_cheek=left_cheek, nose=nose, right_cheek=right_cheek,
               mouth_chin=mouth_chin)
    regions = tuple(_finalize(name, raw[name], lm.frame_size) for name in REGION_NAMES)
    return PatchSet(regions, lm.frame_size)


# ------------------------------------------------------------------ cropping
def crop_and_resize(image: np.ndarray, region: PatchRegion, out: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the cropped box to (h, w); returns float32 (h, w, C)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    x0, y0, x1, y1 = region.box
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(W, x1), min(H, y1)
    if x1 <= x0 or y1 <= y0:
        raise GeometryError(f"region {region.name} {region.box} does not intersect the {W}x{H} image")

    crop = torch.from_numpy(np.ascontiguousarray(img[y0:y1, x0:x1], dtype=np.float32))
    crop = crop.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(crop, size=(int(out[0]), int(out[1])), mode="bilinear",
                            align_corners=False)
    return resized[0].permute(1, 2, 0).numpy()


def crop_patches(image: np.ndarray, patches: PatchSet, out: Tuple[int, int] = (64, 64)) -> List[np.ndarray]:
    """All seven crops in canonical order."""
    return [crop_and_resize(image, region, out) for region in patches]
