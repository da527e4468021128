"""
networks.py
-----------
Model definitions and forward passes.

  FullFaceModel   backbone → 1x1 conv to 640 channels (F_org) → GAP → 64-d
                  embedding → 2 logits, plus a 64-entry categorical style bank
  PatchModel      one per facial region, 64x64 input → 16-d embedding → 2 logits
  FusionModel     attention-weighted concatenation of the seven embeddings → MLP

Models take images in [0, 1] and standardise them with per-channel
statistics stored as buffers (the training split's mean/std).
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.cluster.vq import kmeans2

log = logging.getLogger(__name__)

FEATURE_CHANNELS = 640
FULLFACE_EMBED = 64
PATCH_EMBED = 16
NUM_STYLES = 64
NUM_REGIONS = 7
FUSION_HIDDEN = 64
EPS = 1e-5


# ------------------------------------------------------------------ backbones
def conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SmallBackbone(nn.Module):
    """Stride-2 stages of conv-BN-ReLU; 4 stages for faces, 3 for patches."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers.append(nn.Sequential(conv_bn(cin, cout, stride=2), conv_bn(cout, cout)))
            cin = cout
        self.stages = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.stages(x)


class MobileNetBackbone(nn.Module):
    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import MobileNet_V2_Weights, mobilenet_v2
        weights = MobileNet_V2_Weights.IMAGENET1K_V1 if pretrained else None
        self.features = mobilenet_v2(weights=weights).features
        self.out_channels = 1280

    def forward(self, x):
        return self.features(x)


def build_backbone(name: str, stages: int, width: float = 1.0, pretrained: bool = False) -> nn.Module:
    if name == "small":
        base = (16, 32, 64, 128)[:stages]
        return SmallBackbone([max(4, int(round(c * width))) for c in base])
    if name == "mobilenet_v2":
        return MobileNetBackbone(pretrained=pretrained)
    raise ValueError(f"unknown backbone {name!r} (expected small or mobilenet_v2)")


class _Standardized(nn.Module):
    """Holds the input mean/std buffers shared by all models."""

    def __init__(self):
        super().__init__()
        self.register_buffer("input_mean", torch.zeros(3))
        self.register_buffer("input_std", torch.ones(3))

    def set_normalization(self, mean, std) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32).clamp_min(EPS))

    def standardize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.input_mean.view(1, 3, 1, 1)) / self.input_std.view(1, 3, 1, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        size = self.config["input_size"]
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (size, size):
            raise ValueError(f"expected input of shape (N, 3, {size}, {size}), got {tuple(x.shape)}")


# ------------------------------------------------------------------ style bank + CSA
def instance_stats(feats: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel spatial mean and (population) std."""
    flat = feats.flatten(2)
    return flat.mean(dim=2), flat.std(dim=2, unbiased=False)


class StyleBank(nn.Module):
    """Base styles (mean, std per channel), each tagged with a class label."""

    def __init__(self, n_styles: int = NUM_STYLES, channels: int = FEATURE_CHANNELS):
        super().__init__()
        self.register_buffer("mean", torch.zeros(n_styles, channels))
        self.register_buffer("std", torch.ones(n_styles, channels))
        self.register_buffer("labels", torch.zeros(n_styles, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self._sums: Optional[torch.Tensor] = None
        self._counts: Optional[torch.Tensor] = None

    @property
    def n_styles(self) -> int:
        return self.mean.shape[0]

    def init_from_stats(self, mu: torch.Tensor, sd: torch.Tensor, labels: torch.Tensor, seed: int) -> None:
        """k-means over (mean, std) pairs, styles allotted to classes by frequency."""
        data = torch.cat([mu, sd], dim=1).double().cpu().numpy()
        labels = labels.cpu().numpy()
        classes = sorted(set(labels.tolist()))
        counts = np.array([(labels == c).sum() for c in classes], dtype=float)
        alloc = np.maximum(1, np.floor(self.n_styles * counts / counts.sum())).astype(int)
        alloc[np.argmax(counts)] += self.n_styles - alloc.sum()

        rng = np.random.default_rng(seed)
        centroids, tags = [], []
        for cls, k in zip(classes, alloc):
            pts = data[labels == cls]
            if len(pts) <= k:
                cent = pts[np.arange(k) % len(pts)]
            else:
                cent, _ = kmeans2(pts, k, minit="++", seed=rng)
            centroids.append(cent)
            tags.extend([cls] * k)
        cent = torch.as_tensor(np.concatenate(centroids), dtype=self.mean.dtype)
        c = self.mean.shape[1]
        self.mean.copy_(cent[:, :c])
        self.std.copy_(cent[:, c:].clamp_min(EPS))
        self.labels.copy_(torch.as_tensor(tags, dtype=torch.long))
        self.initialized.fill_(True)
        log.info("style bank initialised: %s", {int(c): int(k) for c, k in zip(classes, alloc)})

    def candidates(self, label: int) -> torch.Tensor:
        idx = torch.nonzero(self.labels == label).flatten()
        return idx if idx.numel() else torch.arange(self.n_styles, device=self.labels.device)

    def sample(self, labels: torch.Tensor, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        picks = []
        for lab in labels.tolist():
            pool = self.candidates(int(lab))
            j = torch.randint(len(pool), (1,), generator=generator).item()
            picks.append(int(pool[j]))
        picks = torch.as_tensor(picks, device=self.mean.device)
        return self.mean[picks], self.std[picks]

    # momentum update: accumulate per-epoch assignments, apply at epoch end
    def accumulate(self, mu: torch.Tensor, sd: torch.Tensor, labels: torch.Tensor) -> None:
        if self._sums is None:
            self._sums = torch.zeros(self.n_styles, 2 * self.mean.shape[1], dtype=torch.float64)
            self._counts = torch.zeros(self.n_styles, dtype=torch.float64)
        point = torch.cat([mu, sd], dim=1).detach().double().cpu()
        bank = torch.cat([self.mean, self.std], dim=1).double().cpu()
        for i, lab in enumerate(labels.tolist()):
            pool = self.candidates(int(lab)).cpu()
            d = (bank[pool] - point[i]).pow(2).sum(dim=1)
            j = int(pool[int(torch.argmin(d))])
            self._sums[j] += point[i]
            self._counts[j] += 1

    def end_epoch(self, momentum: float) -> None:
        if self._sums is None:
            return
        hit = self._counts > 0
        if hit.any():
            means = (self._sums[hit] / self._counts[hit, None]).to(self.mean.dtype)
            c = self.mean.shape[1]
            self.mean[hit] = momentum * self.mean[hit] + (1 - momentum) * means[:, :c]
            self.std[hit] = (momentum * self.std[hit] + (1 - momentum) * means[:, c:]).clamp_min(EPS)
        self._sums, self._counts = None, None


def csa_augment(f_org: torch.Tensor, style_bank: StyleBank, labels: torch.Tensor,
                rng: torch.Generator, lam: Optional[torch.Tensor] = None,
                epsilon: float = EPS) -> torch.Tensor:
    """Re-style each sample with a mix of its own statistics and a same-class base style."""
    n = f_org.shape[0]
    mu, sd = instance_stats(f_org)
    mu_b, sd_b = style_bank.sample(labels, rng)
    if lam is None:
        lam = torch.rand(n, 1, generator=rng)
    lam = torch.as_tensor(lam, dtype=f_org.dtype).reshape(-1, 1).expand(n, 1).to(f_org.device)
    mu_mix = lam * mu_b + (1 - lam) * mu
    sd_mix = lam * sd_b + (1 - lam) * sd
    content = (f_org - mu[..., None, None]) / (sd[..., None, None] + epsilon)
    return sd_mix[..., None, None] * content + mu_mix[..., None, None]


# ------------------------------------------------------------------ models
class FullFaceModel(_Standardized):
    def __init__(self, input_size: int = 256, backbone: str = "small", width: float = 1.0,
                 pretrained: bool = False, n_styles: int = NUM_STYLES):
        super().__init__()
        self.config: Dict = dict(input_size=input_size, backbone=backbone, width=width,
                                 pretrained=pretrained, n_styles=n_styles)
        self.backbone = build_backbone(backbone, stages=4, width=width, pretrained=pretrained)
        self.reduce = nn.Sequential(
            nn.Conv2d(self.backbone.out_channels, FEATURE_CHANNELS, 1, bias=False),
            nn.BatchNorm2d(FEATURE_CHANNELS),
            nn.ReLU(inplace=True),
        )
        self.embed = nn.Linear(FEATURE_CHANNELS, FULLFACE_EMBED)
        self.classifier = nn.Linear(FULLFACE_EMBED, 2)
        self.style_bank = StyleBank(n_styles, FEATURE_CHANNELS)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.reduce(self.backbone(self.standardize(x)))

    def head(self, feats: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        emb = self.embed(F.adaptive_avg_pool2d(feats, 1).flatten(1))
        return emb, self.classifier(emb)

    def forward(self, x: torch.Tensor):
        feats = self.features(x)
        emb, logits = self.head(feats)
        return feats, emb, logits


def forward_fullface(model: FullFaceModel, images: torch.Tensor):
    return model(images)


class PatchModel(_Standardized):
    def __init__(self, input_size: int = 64, backbone: str = "small", width: float = 1.0,
                 pretrained: bool = False):
        super().__init__()
        self.config: Dict = dict(input_size=input_size, backbone=backbone, width=width,
                                 pretrained=pretrained)
        self.backbone = build_backbone(backbone, stages=3, width=width, pretrained=pretrained)
        self.embed = nn.Linear(self.backbone.out_channels, PATCH_EMBED)
        self.classifier = nn.Linear(PATCH_EMBED, 2)

    def forward(self, x: torch.Tensor):
        self._check_input(x)
        feats = self.backbone(self.standardize(x))
        emb = self.embed(F.adaptive_avg_pool2d(feats, 1).flatten(1))
        return emb, self.classifier(emb)


def forward_patch(model: PatchModel, patches: torch.Tensor):
    return model(patches)


class FusionModel(nn.Module):
    def __init__(self, hidden: int = FUSION_HIDDEN):
        super().__init__()
        self.config: Dict = dict(hidden=hidden)
        self.mlp = nn.Sequential(
            nn.Linear(NUM_REGIONS * PATCH_EMBED, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 2),
        )

    def forward(self, flat: torch.Tensor) -> torch.Tensor:
        return self.mlp(flat)


def weight_embeddings(embeddings: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """(N, 7, 16) embeddings scaled by (N, 7) scores, flattened in canonical order."""
    if embeddings.dim() != 3 or embeddings.shape[1:] != (NUM_REGIONS, PATCH_EMBED):
        raise ValueError(f"expected embeddings of shape (N, {NUM_REGIONS}, {PATCH_EMBED}), "
                         f"got {tuple(embeddings.shape)}")
    scores = torch.as_tensor(scores, dtype=embeddings.dtype, device=embeddings.device)
    if scores.shape != embeddings.shape[:2]:
        raise ValueError(f"scores of shape {tuple(scores.shape)} do not align with embeddings")
    return (embeddings * scores.unsqueeze(-1)).flatten(1)


def fuse(embeddings: torch.Tensor, scores: torch.Tensor, model: FusionModel) -> torch.Tensor:
    return model(weight_embeddings(embeddings, scores))


def majority_vote(patch_logits) -> np.ndarray:
    """(N, 7, 2) logits -> (N,) labels; attack wins with at least 4 of 7 votes."""
    logits = torch.as_tensor(patch_logits)
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    if logits.shape[1:] != (NUM_REGIONS, 2):
        raise ValueError(f"expected (N, {NUM_REGIONS}, 2) logits, got {tuple(logits.shape)}")
    votes = (logits.argmax(dim=-1) == 1).sum(dim=1)
    return (votes >= (NUM_REGIONS // 2 + 1)).long().numpy()
