#!/usr/bin/env python3
"""
run_plots.py
------------
Visual checks for a trained phase-1 model and its training logs:
  • Grad-CAM heatmap overlays (jet, 50% blend) on the model-resolution face
  • Patch-box debug images: the seven regions drawn on the original image
  • Loss curves from the per-phase training log CSVs

Writes PNGs into the chosen output directory:
    <sample_id>_heatmap.png, <sample_id>_patches.png,
    phase1_loss.png, phase2_loss.png, fusion_loss.png
"""
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import matplotlib as mpl
mpl.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.patches import Rectangle

from checkpoints import CheckpointDir, load_model
from face_manifest import DatasetManifest, load_manifest
from gradcam_attention import Heatmap, gradcam_heatmap, heatmap_patches, region_attention_scores
from networks import FullFaceModel
from patch_geometry import REGION_NAMES, PatchSet, derive_patch_regions
from train_phases import load_image_tensor, resize_batch, sample_landmarks

log = logging.getLogger(__name__)

# ── Config ──────────────────────────────────────────────────────────────
OVERLAY_ALPHA = 0.5
DPI = 150
cmap = plt.get_cmap("tab10")
REGION_COLORS = {name: cmap(i % 10) for i, name in enumerate(REGION_NAMES)}
PHASE1_COMPONENTS = ["aiaw_org", "tf_org", "ce_org", "aiaw_aug", "tf_aug", "ce_aug", "total"]


# ── Plotting helpers ─────────────────────────────────────────────────────
def _finish(fig, ax, out_path: Path) -> Path:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def blend_heatmap(image: np.ndarray, heatmap: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """(H, W, 3) image in [0, 1] blended with the jet-coloured heatmap of the same size."""
    if image.shape[:2] != heatmap.shape:
        raise ValueError(f"image {image.shape[:2]} and heatmap {heatmap.shape} differ in size")
    colored = plt.get_cmap("jet")(np.clip(heatmap, 0.0, 1.0))[..., :3]
    return (1.0 - alpha) * image + alpha * colored


def save_heatmap_overlay(image: np.ndarray, hm: Heatmap, out_path: Path,
                         patches: Optional[PatchSet] = None, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(blend_heatmap(image, hm.values))
    if patches is not None:
        _draw_boxes(ax, patches, annotate=False)
    ax.set_title(title or f"Grad-CAM (class {hm.source_class})")
    ax.set_axis_off()
    return _finish(fig, ax, Path(out_path))


def _draw_boxes(ax, patches: PatchSet, annotate: bool = True, scores=None):
    for i, region in enumerate(patches):
        x0, y0, x1, y1 = region.box
        color = REGION_COLORS[region.name]
        ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                               fill=False, edgecolor=color, linewidth=1.2))
        if annotate:
            text = region.name if scores is None else f"{region.name} {scores[i]:.2f}"
            ax.text(x0, y0 - 1, text, color=color, fontsize=6, va="bottom")


def save_patch_boxes(image: np.ndarray, patches: PatchSet, out_path: Path, scores=None,
                     landmarks: Optional[np.ndarray] = None, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image)
    if landmarks is not None:
        ax.scatter(landmarks[:, 0], landmarks[:, 1], s=2, color="white")
    _draw_boxes(ax, patches, annotate=True, scores=scores)
    ax.set_title(title or "patch regions")
    ax.set_axis_off()
    return _finish(fig, ax, Path(out_path))


def plot_loss_curves(log_paths: Iterable[Path], out_dir: Path) -> List[Path]:
    """One figure per log file; the phase is read from the columns present."""
    written = []
    for path in log_paths:
        path = Path(path)
        table = pd.read_csv(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        if "region" in table.columns:
            for region, sub in table.groupby("region", sort=False):
                ax.plot(sub["epoch"], sub["total"], label=region, color=REGION_COLORS.get(region))
            name = "phase2_loss.png"
        elif "aiaw_org" in table.columns:
            for col in PHASE1_COMPONENTS:
                ax.plot(table["epoch"], table[col], label=col,
                        linewidth=2.0 if col == "total" else 1.0)
            name = "phase1_loss.png"
        else:
            ax.plot(table["epoch"], table["ce"], label="ce", color="black")
            name = "fusion_loss.png"
        ax.set_xlabel("Epoch")
        ax.set_ylabel("Loss")
        ax.set_title(path.stem.replace("_", " "))
        ax.legend(fontsize=7, frameon=False)
        written.append(_finish(fig, ax, Path(out_dir) / name))
    return written


# ── Main ───────────────────────────────────────────────────────────────
def visualize_samples(model: FullFaceModel, manifest: DatasetManifest, out_dir: Path,
                      sample_ids: Sequence[str] = (), limit: int = 8,
                      k_percent: float = 50.0) -> List[Path]:
    out_dir = Path(out_dir)
    chosen = [manifest[sid] for sid in sample_ids] if sample_ids else manifest.samples[:limit]
    size = model.config["input_size"]
    written = []
    for sample in chosen:
        image = load_image_tensor(sample)
        face = resize_batch([image], size)[0]
        hm = gradcam_heatmap(model, face)
        hm_patches = heatmap_patches(sample_landmarks(sample), (size, size))
        scores = region_attention_scores(hm, hm_patches, k_percent).scores
        written.append(save_heatmap_overlay(
            face.permute(1, 2, 0).numpy(), hm, out_dir / f"{sample.sample_id}_heatmap.png",
            patches=hm_patches, title=f"{sample.sample_id} ({sample.label.token})"))

        lm = sample_landmarks(sample)
        written.append(save_patch_boxes(
            image.permute(1, 2, 0).numpy(), derive_patch_regions(lm),
            out_dir / f"{sample.sample_id}_patches.png", scores=scores, landmarks=lm.points,
            title=sample.sample_id))
    log.info("wrote %d visualisations to %s", len(written), out_dir)
    return written


def main(ckpt_dir: str, manifest_path: str, out_dir: str, limit: int = 8) -> None:
    ckpt = CheckpointDir(ckpt_dir)
    model = load_model(ckpt.phase1, "fullface")
    written = visualize_samples(model, load_manifest(manifest_path), Path(out_dir), limit=limit)
    logs = [ckpt.log(p) for p in ("phase1", "phase2", "fusion") if ckpt.log(p).exists()]
    written += plot_loss_curves(logs, Path(out_dir))
    print(f"✅ {len(written)} plots saved to {out_dir}/")


if __name__ == "__main__":
    import sys
    main(sys.argv[1], sys.argv[2], sys.argv[3])
