"""
gradcam_attention.py
--------------------
Grad-CAM on the full-face model and per-region attention scores.

Heatmap: A = activations of the target conv layer, w_c = spatial mean of
∂logit[target]/∂A_c, heatmap = ReLU(Σ_c w_c A_c) divided by its max (all-zero
stays all-zero), bilinearly resized to the input resolution.

Region score: mean of the top-k% heatmap values inside the region box, with
the pixel count rounded up and at least one pixel.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from patch_geometry import REGION_NAMES, LandmarkSet, PatchSet, derive_patch_regions, rescale_landmarks

log = logging.getLogger(__name__)

ATTENTION_COLUMNS = ["sample_id", *REGION_NAMES, "k_percent"]
DEFAULT_K_PERCENT = 50.0


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray     # (H, W) in [0, 1]
    source_class: int


@dataclass(frozen=True)
class AttentionScores:
    scores: np.ndarray     # (7,) canonical region order
    k_percent: float

    def as_dict(self):
        return dict(zip(REGION_NAMES, (float(s) for s in self.scores)))


class GradCAM:
    """Captures the target layer's output with a forward hook and differentiates through it."""

    def __init__(self, model: nn.Module, target_layer: str = "reduce"):
        modules = dict(model.named_modules())
        layer = modules.get(target_layer)
        if layer is None or not any(isinstance(m, nn.Conv2d) for m in layer.modules()):
            raise ValueError(f"model lacks a convolutional feature layer named {target_layer!r}")
        self.model = model
        self.activations: Optional[torch.Tensor] = None
        self._handle = layer.register_forward_hook(self._hook)

    def _hook(self, module, inputs, output):
        self.activations = output

    def close(self) -> None:
        self._handle.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def channel_weights(self, images: torch.Tensor, target_class=None
                        ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (activations, per-channel weights (N, C), target classes (N,))."""
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.enable_grad():
                out = self.model(images)
                logits = out[-1] if isinstance(out, (tuple, list)) else out
                acts = self.activations
                if target_class is None:
                    targets = logits.argmax(dim=1)
                else:
                    targets = torch.as_tensor(target_class, device=logits.device).reshape(-1)
                    targets = targets.expand(logits.shape[0]) if targets.numel() == 1 else targets
                chosen = logits.gather(1, targets.view(-1, 1)).sum()
                grads = torch.autograd.grad(chosen, acts)[0]
        finally:
            self.model.train(was_training)
        return acts.detach(), grads.mean(dim=(2, 3)), targets.detach()

    def __call__(self, images: torch.Tensor, target_class=None) -> Tuple[np.ndarray, np.ndarray]:
        """(N, H, W) heatmaps in [0, 1] at the input resolution, plus the classes explained."""
        acts, weights, targets = self.channel_weights(images, target_class)
        raw = F.relu((weights[:, :, None, None] * acts).sum(dim=1))
        peak = raw.flatten(1).max(dim=1).values.clamp_min(0)
        scale = torch.where(peak > 0, peak, torch.ones_like(peak))
        cam = raw / scale[:, None, None]
        cam = F.interpolate(cam.unsqueeze(1), size=tuple(images.shape[-2:]), mode="bilinear",
                            align_corners=False)[:, 0]
        return cam.clamp(0.0, 1.0).cpu().numpy(), targets.cpu().numpy()


def gradcam_heatmap(model: nn.Module, image: torch.Tensor, target_class: Optional[int] = None,
                    target_layer: str = "reduce") -> Heatmap:
    """Single image (3, H, W) in [0, 1]; target defaults to the predicted class."""
    with GradCAM(model, target_layer) as cam:
        maps, classes = cam(image.unsqueeze(0), target_class)
    return Heatmap(values=maps[0], source_class=int(classes[0]))


# ------------------------------------------------------------------ region scoring
def top_k_mean(values: np.ndarray, k_percent: float) -> float:
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())[::-1]
    if flat.size == 0:
        raise ValueError("empty region")
    n = max(1, math.ceil(k_percent / 100.0 * flat.size))
    return float(flat[:n].sum() / n)


def region_attention_scores(hm: Heatmap, patches: PatchSet, k_percent: float = DEFAULT_K_PERCENT
                            ) -> AttentionScores:
    if not 0.0 < k_percent <= 100.0:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    h, w = hm.values.shape
    scores = []
    for region in patches:
        x0, y0, x1, y1 = region.box
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ValueError(f"region {region.name} {region.box} exceeds the {w}x{h} heatmap")
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"region {region.name} is empty")
        scores.append(top_k_mean(hm.values[y0:y1, x0:x1], k_percent))
    return AttentionScores(np.asarray(scores), float(k_percent))


def heatmap_patches(landmarks: LandmarkSet, heatmap_size: Tuple[int, int]) -> PatchSet:
    """Regions on the heatmap grid: landmarks rescaled to (W, H) first."""
    return derive_patch_regions(rescale_landmarks(landmarks, heatmap_size))


# ------------------------------------------------------------------ attention table IO
def attention_frame(rows: Sequence[Tuple[str, AttentionScores]]) -> pd.DataFrame:
    records = [{"sample_id": sid, **sc.as_dict(), "k_percent": sc.k_percent} for sid, sc in rows]
    return pd.DataFrame.from_records(records, columns=ATTENTION_COLUMNS)


def write_attention_table(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, columns=ATTENTION_COLUMNS, float_format="%.8f")
    return path


def read_attention_table(path) -> pd.DataFrame:
    table = pd.read_csv(path, dtype={"sample_id": str})
    missing = [c for c in ATTENTION_COLUMNS if c not in table.columns]
    if missing:
        raise ValueError(f"{path}: attention table lacks columns {missing}")
    return table.set_index("sample_id", drop=False)
