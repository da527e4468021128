"""
train_phases.py
---------------
The two-phase training protocol and inference.

  phase 1    full-face model on 256x256 faces: CE + triplet focal + AIAW on the
             original and the CSA-restyled feature branch
  attention  Grad-CAM on the phase-1 model's predicted class, pooled per region
  phase 2    seven independent 64x64 patch models, CE + triplet focal
  fusion     attention-weighted patch embeddings → MLP (or majority vote)
  predict    the whole chain on one sample → attack probability

Randomness comes from the run seed only: every consumer draws from its own
Philox stream, so toggling one component never shifts another's data order.
Batches are class balanced (half live, half attack).
"""
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from tqdm import tqdm

from checkpoints import CheckpointDir, load_model, read_norm_stats, save_model, write_norm_stats
from compose_folds import philox
from face_manifest import DatasetManifest, FaceSample, Label, load_image, read_landmarks, read_planted_regions
from gradcam_attention import GradCAM, Heatmap, attention_frame, heatmap_patches, region_attention_scores
from losses import LossWeights, Phase1Parts, aiaw_components, mined_triplet_loss, patch_loss, phase1_total_loss
from networks import (
    NUM_REGIONS, FullFaceModel, FusionModel, PatchModel, csa_augment, instance_stats, majority_vote,
    weight_embeddings,
)
from pad_errors import ManifestError, TrainingError
from pad_metrics import ScoredSample
from patch_geometry import REGION_NAMES, LandmarkSet, crop_patches, derive_patch_regions, rescale_landmarks
from train_config import Phase1Config, TrainConfig

log = logging.getLogger(__name__)

# Philox stream ids
STREAM_PHASE1_INIT = 1
STREAM_PHASE1_SAMPLER = 2
STREAM_PHASE1_TRIPLETS = 3
STREAM_PHASE1_CSA = 4
STREAM_STYLE_BANK = 5
STREAM_PATCH_SAMPLER = 10          # shared by all seven regions
STREAM_PATCH_INIT = 20             # + region index
STREAM_PATCH_TRIPLETS = 30         # + region index
STREAM_FUSION_INIT = 40
STREAM_FUSION_SAMPLER = 41

PHASE1_LOG_COLUMNS = ["epoch", "aiaw_org", "tf_org", "ce_org", "aiaw_aug", "tf_aug", "ce_aug",
                      "total", "wall_time"]
PHASE2_LOG_COLUMNS = ["region", "epoch", "ce", "tf", "total", "wall_time"]
FUSION_LOG_COLUMNS = ["epoch", "ce", "wall_time"]


def torch_seed(seed: int, stream: int) -> int:
    return int(philox(seed, stream).integers(2**62))


# ------------------------------------------------------------------ data
def sample_landmarks(sample: FaceSample) -> LandmarkSet:
    return LandmarkSet(read_landmarks(sample.landmark_path), sample.reference_size)


def load_image_tensor(sample: FaceSample) -> torch.Tensor:
    try:
        img = load_image(sample.image_path)
    except OSError as exc:
        raise ManifestError(f"cannot load image for {sample.sample_id}: {exc}",
                            path=sample.image_path) from exc
    return torch.from_numpy(img).permute(2, 0, 1).contiguous()


def _sample_crops(sample: FaceSample, image: torch.Tensor, size: int) -> torch.Tensor:
    """(7, 3, size, size) uint8 crops in canonical order."""
    h, w = image.shape[-2:]
    lm = sample_landmarks(sample)
    if lm.frame_size != (w, h):
        lm = rescale_landmarks(lm, (w, h))
    crops = crop_patches(image.permute(1, 2, 0).numpy(), derive_patch_regions(lm), (size, size))
    stacked = np.stack([np.clip(np.rint(c), 0, 255) for c in crops]).astype(np.uint8)
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def resize_batch(images: Sequence[torch.Tensor], size: int) -> torch.Tensor:
    """uint8 (3, H, W) images → float (N, 3, size, size) in [0, 1]."""
    out = []
    for img in images:
        x = img.float().div(255.0).unsqueeze(0)
        if tuple(x.shape[-2:]) != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        out.append(x[0])
    return torch.stack(out)


class TrainingData:
    """Decoded images and patch crops of a manifest, loaded once and shared by every stage."""

    def __init__(self, manifest: DatasetManifest, patch_size: int = 64):
        self.manifest = manifest
        self.patch_size = patch_size

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def samples(self) -> List[FaceSample]:
        return self.manifest.samples

    @cached_property
    def labels(self) -> torch.Tensor:
        return torch.as_tensor(self.manifest.labels, dtype=torch.long)

    @cached_property
    def images(self) -> List[torch.Tensor]:
        return [load_image_tensor(s) for s in tqdm(self.samples, desc="load images", leave=False)]

    @cached_property
    def crops(self) -> torch.Tensor:
        """(N, 7, 3, p, p) uint8."""
        return torch.stack([
            _sample_crops(s, img, self.patch_size)
            for s, img in tqdm(list(zip(self.samples, self.images)), desc="crop patches", leave=False)
        ])

    @cached_property
    def norm_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std of the images in [0, 1], pooled over every pixel."""
        total = np.zeros(3)
        total_sq = np.zeros(3)
        count = 0
        for img in self.images:
            x = img.double().div(255.0).flatten(1)
            total += x.sum(dim=1).numpy()
            total_sq += x.pow(2).sum(dim=1).numpy()
            count += x.shape[1]
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
        return mean, std

    def batch(self, index, size: int) -> torch.Tensor:
        return resize_batch([self.images[i] for i in index], size)


def _as_data(data: Union[DatasetManifest, TrainingData], patch_size: int = 64) -> TrainingData:
    return data if isinstance(data, TrainingData) else TrainingData(data, patch_size)


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """One epoch of batches, each half live and half attack; the smaller class is cycled."""
    live = np.flatnonzero(labels == 0)
    attack = np.flatnonzero(labels == 1)
    if len(live) == 0 or len(attack) == 0:
        raise TrainingError("class-balanced batches need both live and attack samples")
    half = batch_size // 2
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    need = n_batches * half

    def cycle(idx):
        reps = math.ceil(need / len(idx))
        return np.concatenate([rng.permutation(idx) for _ in range(reps)])[:need]

    live_order, attack_order = cycle(live), cycle(attack)
    return [np.concatenate([live_order[b * half:(b + 1) * half], attack_order[b * half:(b + 1) * half]])
            for b in range(n_batches)]


def write_training_log(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


# ------------------------------------------------------------------ phase 1
def phase1_weights(cfg: Phase1Config) -> LossWeights:
    """Disabled components get zero weight; nothing else changes."""
    update = {}
    if not cfg.use_aiaw:
        update.update(alpha1=0.0, alpha2=0.0)
    if not cfg.use_tf:
        update.update(beta1=0.0, beta2=0.0)
    return cfg.weights.model_copy(update=update)


def seed_style_bank(model: FullFaceModel, f_org: torch.Tensor, y: torch.Tensor, seed: int) -> None:
    """k-means over the instance statistics of the first training batch."""
    mu, sd = instance_stats(f_org.detach())
    model.style_bank.init_from_stats(mu, sd, y, seed=torch_seed(seed, STREAM_STYLE_BANK))


def phase1_losses(model: FullFaceModel, x: torch.Tensor, y: torch.Tensor, cfg: Phase1Config,
                  mine_rng: np.random.Generator, csa_rng: torch.Generator, seed: int = 0
                  ) -> Tuple[Phase1Parts, torch.Tensor]:
    """Every loss component of one step, plus F_org for the style-bank update."""
    f_org = model.features(x)
    if cfg.use_csa and not bool(model.style_bank.initialized):
        seed_style_bank(model, f_org, y, seed)
    emb_org, logits_org = model.head(f_org)
    f_aug = csa_augment(f_org, model.style_bank, y, csa_rng) if cfg.use_csa else f_org
    emb_aug, logits_aug = model.head(f_aug)

    zero = f_org.sum() * 0.0
    if cfg.use_tf:
        tf_org = mined_triplet_loss(emb_org, y, cfg.triplet, mine_rng)
        tf_aug = mined_triplet_loss(emb_aug, y, cfg.triplet, mine_rng)
    else:
        tf_org = tf_aug = zero
    if cfg.use_aiaw:
        aiaw_org, aiaw_aug = aiaw_components(f_org, f_aug, y, cfg.aiaw)
    else:
        aiaw_org = aiaw_aug = zero

    parts = Phase1Parts(
        aiaw_org=aiaw_org, tf_org=tf_org, ce_org=F.cross_entropy(logits_org, y),
        aiaw_aug=aiaw_aug, tf_aug=tf_aug, ce_aug=F.cross_entropy(logits_aug, y),
    )
    return parts, f_org


def train_phase1(cfg: TrainConfig, train: Union[DatasetManifest, TrainingData],
                 device: str = "cpu") -> Tuple[FullFaceModel, pd.DataFrame]:
    data = _as_data(train, cfg.phase2.input_size)
    data.manifest.require_both_labels()
    p1, seed = cfg.phase1, cfg.seed

    torch.manual_seed(torch_seed(seed, STREAM_PHASE1_INIT))
    model = FullFaceModel(input_size=p1.input_size, backbone=p1.backbone, width=p1.width,
                          pretrained=p1.pretrained, n_styles=p1.n_styles)
    model.set_normalization(*data.norm_stats)
    model.to(device)

    optimizer = torch.optim.Adam(model.parameters(), lr=p1.lr)
    sampler_rng = philox(seed, STREAM_PHASE1_SAMPLER)
    mine_rng = philox(seed, STREAM_PHASE1_TRIPLETS)
    csa_rng = torch.Generator().manual_seed(torch_seed(seed, STREAM_PHASE1_CSA))
    weights = phase1_weights(p1)
    labels = data.labels.numpy()

    rows = []
    for epoch in tqdm(range(1, p1.epochs + 1), desc="phase 1", leave=False):
        model.train()
        start = time.perf_counter()
        sums: Dict[str, float] = defaultdict(float)
        batches = balanced_batches(labels, p1.batch_size, sampler_rng)
        for idx in batches:
            x = data.batch(idx, p1.input_size).to(device)
            y = data.labels[idx].to(device)
            parts, f_org = phase1_losses(model, x, y, p1, mine_rng, csa_rng, seed)
            total = phase1_total_loss(parts, weights)
            if not torch.isfinite(total):
                raise TrainingError(f"phase 1 loss is not finite at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if p1.use_csa:
                model.style_bank.accumulate(*instance_stats(f_org.detach()), y)
            for name, value in parts.as_dict().items():
                sums[name] += value
            sums["total"] += total.detach().item()
        if p1.use_csa:
            with torch.no_grad():
                model.style_bank.end_epoch(p1.style_momentum)

        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()},
               "wall_time": time.perf_counter() - start}
        rows.append(row)
        log.info("phase 1 epoch %d/%d total=%.4f ce_org=%.4f", epoch, p1.epochs,
                 row["total"], row["ce_org"])
    model.eval()
    return model, pd.DataFrame(rows, columns=PHASE1_LOG_COLUMNS)


# ------------------------------------------------------------------ attention
def extract_attention(model: FullFaceModel, manifest: Union[DatasetManifest, TrainingData],
                      k_percent: float, batch_size: int = 16, device: str = "cpu") -> pd.DataFrame:
    """One row of seven region scores per sample, on the model's predicted class."""
    data = _as_data(manifest)
    size = model.config["input_size"]
    rows = []
    with GradCAM(model) as cam:
        for start in tqdm(range(0, len(data), batch_size), desc="attention", leave=False):
            idx = np.arange(start, min(start + batch_size, len(data)))
            maps, classes = cam(data.batch(idx, size).to(device))
            for j, i in enumerate(idx):
                sample = data.samples[i]
                patches = heatmap_patches(sample_landmarks(sample), (size, size))
                scores = region_attention_scores(Heatmap(maps[j], int(classes[j])), patches, k_percent)
                rows.append((sample.sample_id, scores))
    return attention_frame(rows)


def attention_matrix(table: pd.DataFrame, samples: Sequence[FaceSample]) -> np.ndarray:
    """(N, 7) scores aligned with `samples`."""
    indexed = table.set_index("sample_id", drop=False) if table.index.name != "sample_id" else table
    missing = [s.sample_id for s in samples if s.sample_id not in indexed.index]
    if missing:
        raise ManifestError(f"no attention row for {len(missing)} sample(s), e.g. {missing[0]!r}; "
                            "re-run extract-attention on this manifest")
    return indexed.loc[[s.sample_id for s in samples], list(REGION_NAMES)].to_numpy(dtype=np.float64)


PLANTED_QUORUM = 0.8


@dataclass(frozen=True)
class AttentionSanity:
    """How often Grad-CAM favours the planted regions of an attack sample over its clean ones."""
    k_percent: float
    n_samples: int
    n_hits: int
    quorum: float = PLANTED_QUORUM

    @property
    def fraction(self) -> float:
        return self.n_hits / self.n_samples

    @property
    def passed(self) -> bool:
        return self.fraction >= self.quorum

    def as_dict(self) -> Dict:
        return {"k_percent": self.k_percent, "n_samples": self.n_samples, "n_hits": self.n_hits,
                "fraction": self.fraction, "quorum": self.quorum, "passed": self.passed}


def planted_attention_sanity(table: pd.DataFrame, samples: Sequence[FaceSample],
                             quorum: float = PLANTED_QUORUM) -> AttentionSanity:
    """Counts attack samples whose mean planted-region score exceeds the mean of the rest.

    Samples without a planted sidecar, or with all seven regions planted, are skipped.
    """
    judged = []
    for sample in samples:
        if sample.label is not Label.ATTACK:
            continue
        planted = set(read_planted_regions(sample))
        if planted and len(planted) < NUM_REGIONS:
            judged.append((sample, [name in planted for name in REGION_NAMES]))
    if not judged:
        raise ManifestError("no attack sample with a planted-region sidecar to check attention against")
    values = attention_matrix(table, [s for s, _ in judged])
    mask = np.array([m for _, m in judged], dtype=bool)
    planted_mean = np.where(mask, values, 0.0).sum(axis=1) / mask.sum(axis=1)
    clean_mean = np.where(mask, 0.0, values).sum(axis=1) / (~mask).sum(axis=1)
    return AttentionSanity(k_percent=float(table["k_percent"].iloc[0]),
                           n_samples=len(judged), n_hits=int((planted_mean > clean_mean).sum()),
                           quorum=quorum)


# ------------------------------------------------------------------ phase 2
def train_patch_model(region_index: int, crops: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig,
                      norm: Tuple[np.ndarray, np.ndarray], device: str = "cpu"
                      ) -> Tuple[PatchModel, pd.DataFrame]:
    """One region's loop; crops are (N, 3, p, p) uint8."""
    p2, seed = cfg.phase2, cfg.seed
    region = REGION_NAMES[region_index]
    torch.manual_seed(torch_seed(seed, STREAM_PATCH_INIT + region_index))
    model = PatchModel(input_size=p2.input_size, backbone=p2.backbone, width=p2.width,
                       pretrained=p2.pretrained)
    model.set_normalization(*norm)
    model.to(device)

    optimizer = torch.optim.Adam(model.parameters(), lr=p2.lr)
    sampler_rng = philox(seed, STREAM_PATCH_SAMPLER)
    mine_rng = philox(seed, STREAM_PATCH_TRIPLETS + region_index)
    weights = p2.weights if p2.use_tf else p2.weights.model_copy(update={"beta": 0.0})
    labels_np = labels.numpy()

    rows = []
    for epoch in range(1, p2.epochs + 1):
        model.train()
        start = time.perf_counter()
        sums: Dict[str, float] = defaultdict(float)
        batches = balanced_batches(labels_np, p2.batch_size, sampler_rng)
        for idx in batches:
            x = crops[idx].float().div(255.0).to(device)
            y = labels[idx].to(device)
            emb, logits = model(x)
            ce = F.cross_entropy(logits, y)
            tf = mined_triplet_loss(emb, y, p2.triplet, mine_rng) if p2.use_tf else ce * 0.0
            total = patch_loss(ce, tf, weights)
            if not torch.isfinite(total):
                raise TrainingError(f"{region} loss is not finite at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums["ce"] += ce.detach().item()
            sums["tf"] += tf.detach().item()
            sums["total"] += total.detach().item()
        rows.append({"region": region, "epoch": epoch, **{k: v / len(batches) for k, v in sums.items()},
                     "wall_time": time.perf_counter() - start})
    log.info("phase 2 %s: final total=%.4f", region, rows[-1]["total"])
    model.eval()
    return model, pd.DataFrame(rows, columns=PHASE2_LOG_COLUMNS)


def train_phase2(cfg: TrainConfig, train: Union[DatasetManifest, TrainingData], device: str = "cpu",
                 norm: Tuple[np.ndarray, np.ndarray] = None) -> Tuple[List[PatchModel], pd.DataFrame]:
    data = _as_data(train, cfg.phase2.input_size)
    data.manifest.require_both_labels()
    if data.patch_size != cfg.phase2.input_size:
        data = TrainingData(data.manifest, cfg.phase2.input_size)
    norm = norm if norm is not None else data.norm_stats
    crops = data.crops

    jobs = (delayed(train_patch_model)(r, crops[:, r].contiguous(), data.labels, cfg, norm, device)
            for r in range(NUM_REGIONS))
    results = Parallel(n_jobs=cfg.phase2.n_jobs)(jobs)
    models = [m for m, _ in results]
    return models, pd.concat([t for _, t in results], ignore_index=True)


# ------------------------------------------------------------------ fusion
@torch.no_grad()
def patch_embeddings(patches: Sequence[PatchModel], crops: torch.Tensor, batch_size: int = 64,
                     device: str = "cpu") -> Tuple[torch.Tensor, torch.Tensor]:
    """Frozen patch models on (N, 7, 3, p, p) crops → embeddings (N, 7, 16), logits (N, 7, 2)."""
    if len(patches) != NUM_REGIONS:
        raise ValueError(f"expected {NUM_REGIONS} patch models, got {len(patches)}")
    embs, logits = [], []
    for model in patches:
        model.eval()
    for start in range(0, crops.shape[0], batch_size):
        chunk = crops[start:start + batch_size].float().div(255.0).to(device)
        outs = [model(chunk[:, r]) for r, model in enumerate(patches)]
        embs.append(torch.stack([e for e, _ in outs], dim=1).cpu())
        logits.append(torch.stack([l for _, l in outs], dim=1).cpu())
    return torch.cat(embs), torch.cat(logits)


def train_fusion(cfg: TrainConfig, patches: Sequence[PatchModel], attention: pd.DataFrame,
                 train: Union[DatasetManifest, TrainingData], device: str = "cpu"
                 ) -> Tuple[Optional[FusionModel], pd.DataFrame]:
    """Majority-vote mode trains nothing and returns no model."""
    fc, seed = cfg.fusion, cfg.seed
    if fc.mode == "majority_vote":
        return None, pd.DataFrame(columns=FUSION_LOG_COLUMNS)
    data = _as_data(train, cfg.phase2.input_size)
    data.manifest.require_both_labels()

    emb, _ = patch_embeddings(patches, data.crops, device=device)
    if fc.mode == "weighted_mlp":
        scores = torch.as_tensor(attention_matrix(attention, data.samples), dtype=emb.dtype)
    else:
        scores = torch.ones(emb.shape[:2], dtype=emb.dtype)
    inputs = weight_embeddings(emb, scores)

    torch.manual_seed(torch_seed(seed, STREAM_FUSION_INIT))
    model = FusionModel(hidden=fc.hidden).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=fc.lr)
    sampler_rng = philox(seed, STREAM_FUSION_SAMPLER)
    labels = data.labels
    rows = []
    for epoch in range(1, fc.epochs + 1):
        model.train()
        start = time.perf_counter()
        batches = balanced_batches(labels.numpy(), fc.batch_size, sampler_rng)
        running = 0.0
        for idx in batches:
            loss = F.cross_entropy(model(inputs[idx].to(device)), labels[idx].to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.detach().item()
        rows.append({"epoch": epoch, "ce": running / len(batches),
                     "wall_time": time.perf_counter() - start})
    log.info("fusion (%s): final ce=%.4f", fc.mode, rows[-1]["ce"])
    model.eval()
    return model, pd.DataFrame(rows, columns=FUSION_LOG_COLUMNS)


# ------------------------------------------------------------------ trained system
@dataclass
class TrainedSystem:
    fullface: FullFaceModel
    patches: List[PatchModel]
    fusion: Optional[FusionModel]
    mode: str = "weighted_mlp"
    attention_k: float = 50.0
    threshold: float = 0.5
    device: str = "cpu"

    def __post_init__(self):
        if len(self.patches) != NUM_REGIONS:
            raise TrainingError(f"a trained system needs {NUM_REGIONS} patch models, got {len(self.patches)}")
        sizes = {m.config["input_size"] for m in self.patches}
        if len(sizes) != 1:
            raise TrainingError(f"patch models disagree on input size: {sorted(sizes)}")
        if (self.fusion is None) != (self.mode == "majority_vote"):
            raise TrainingError(f"fusion mode {self.mode!r} does not match the fusion model present")

    @property
    def patch_size(self) -> int:
        return self.patches[0].config["input_size"]

    def save(self, ckpt: CheckpointDir) -> None:
        save_model(self.fullface, ckpt.phase1)
        for region, model in zip(REGION_NAMES, self.patches):
            save_model(model, ckpt.patch(region))
        if self.fusion is not None:
            save_model(self.fusion, ckpt.fusion)
        write_norm_stats(self.fullface.input_mean.cpu().numpy(), self.fullface.input_std.cpu().numpy(),
                         ckpt.norm_stats)

    @classmethod
    def load(cls, ckpt: CheckpointDir, cfg: TrainConfig, device: str = "cpu") -> "TrainedSystem":
        mode = cfg.fusion.mode
        fullface = load_model(ckpt.phase1, "fullface", device)
        patches = [load_model(ckpt.patch(r), "patch", device) for r in REGION_NAMES]
        fusion = None if mode == "majority_vote" else load_model(ckpt.fusion, "fusion", device)
        if ckpt.norm_stats.exists():
            mean, std = read_norm_stats(ckpt.norm_stats)
            if not np.allclose(mean, fullface.input_mean.cpu().numpy(), atol=1e-6):
                log.warning("norm_stats.txt disagrees with the statistics stored in phase1.ckpt")
        return cls(fullface, patches, fusion, mode=mode, attention_k=cfg.attention.k_percent,
                   threshold=cfg.evaluate.threshold, device=device)


def _predict_batch(system: TrainedSystem, samples: Sequence[FaceSample]) -> Tuple[np.ndarray, np.ndarray]:
    """(attack scores, labels) for a chunk of samples."""
    images = [load_image_tensor(s) for s in samples]
    crops = torch.stack([_sample_crops(s, img, system.patch_size) for s, img in zip(samples, images)])
    emb, patch_logits = patch_embeddings(system.patches, crops, device=system.device)

    if system.mode == "majority_vote":
        votes = (patch_logits.argmax(dim=-1) == 1).sum(dim=1)
        return votes.double().numpy() / NUM_REGIONS, majority_vote(patch_logits)

    if system.mode == "weighted_mlp":
        size = system.fullface.config["input_size"]
        with GradCAM(system.fullface) as cam:
            maps, classes = cam(resize_batch(images, size).to(system.device))
        scores = []
        for s, hm, cls in zip(samples, maps, classes):
            patches = heatmap_patches(sample_landmarks(s), (size, size))
            scores.append(region_attention_scores(Heatmap(hm, int(cls)), patches, system.attention_k).scores)
        weights = torch.as_tensor(np.stack(scores), dtype=emb.dtype)
    else:
        weights = torch.ones(emb.shape[:2], dtype=emb.dtype)

    with torch.no_grad():
        logits = system.fusion(weight_embeddings(emb, weights).to(system.device))
        scores = torch.softmax(logits.double(), dim=1)[:, 1].cpu().numpy()
    return scores, (scores >= system.threshold).astype(np.int64)


def predict(system: TrainedSystem, sample: FaceSample) -> Tuple[float, int]:
    """(attack probability in [0, 1], label) for one sample."""
    scores, labels = _predict_batch(system, [sample])
    return float(scores[0]), int(labels[0])


def predict_manifest(system: TrainedSystem, manifest: DatasetManifest, batch_size: int = 16
                     ) -> List[ScoredSample]:
    out = []
    samples = manifest.samples
    for start in tqdm(range(0, len(samples), batch_size), desc="predict", leave=False):
        chunk = samples[start:start + batch_size]
        for s, score in zip(chunk, _predict_batch(system, chunk)[0]):
            out.append(ScoredSample(sample_id=s.sample_id, subject_id=s.subject_id, label=s.label,
                                    attack_type=s.attack_type, score=float(score)))
    return out
