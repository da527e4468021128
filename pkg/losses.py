"""
losses.py
---------
Training objectives.

• pairwise squared distances and online random hard-negative mining
• triplet focal loss:  sum max(0, e^{D(a,p)/σ} - e^{D(a,n)/σ} + m)
• AIAW: instance-normalised covariance, style-sensitive entries selected by
  |Σ_org - Σ_aug| with class-dependent ratios, penalised by mean |Σ ⊙ M|
• phase-1 composite (org + aug branches) and per-patch composite
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

EXP_CLAMP = 30.0
EPS = 1e-5


# ------------------------------------------------------------------ configs
class TripletConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    margin: float = Field(0.6, ge=0.0)
    sigma: float = Field(2.0, gt=0.0)


class AiawConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # 0.09% and 0.06% read literally as fractions of the off-diagonal entries
    k_live: float = Field(9e-4, gt=0.0, le=1.0)
    k_attack: float = Field(6e-4, gt=0.0, le=1.0)
    epsilon: float = Field(EPS, gt=0.0)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha1: float = Field(1.0, ge=0.0)
    beta1: float = Field(0.1, ge=0.0)
    gamma1: float = Field(1.0, ge=0.0)
    alpha2: float = Field(1.0, ge=0.0)
    beta2: float = Field(0.1, ge=0.0)
    gamma2: float = Field(1.0, ge=0.0)
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(0.1, ge=0.0)


FULLFACE_TRIPLET = TripletConfig(margin=0.6, sigma=2.0)
PATCH_TRIPLET = TripletConfig(margin=1.0, sigma=1.5)


# ------------------------------------------------------------------ triplets
@dataclass
class TripletBatch:
    triplets: List[Tuple[int, int, int]]

    def __len__(self) -> int:
        return len(self.triplets)

    def validate(self, labels: Sequence[int]) -> None:
        n = len(labels)
        for a, p, neg in self.triplets:
            if not (0 <= a < n and 0 <= p < n and 0 <= neg < n):
                raise ValueError(f"triplet {(a, p, neg)} out of range for batch of {n}")
            if a == p or labels[a] != labels[p] or labels[a] == labels[neg]:
                raise ValueError(f"invalid triplet {(a, p, neg)}")

    def index_tensors(self, device=None):
        if not self.triplets:
            empty = torch.zeros(0, dtype=torch.long, device=device)
            return empty, empty, empty
        idx = torch.tensor(self.triplets, dtype=torch.long, device=device)
        return idx[:, 0], idx[:, 1], idx[:, 2]


def pairwise_sq_dist(embeddings: torch.Tensor) -> torch.Tensor:
    """D[i, j] = sum_k (e_i[k] - e_j[k])^2; exactly symmetric with a zero diagonal."""
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    return diff.pow(2).sum(dim=-1)


def _focal_terms(d_ap, d_an, cfg: TripletConfig):
    if isinstance(d_ap, torch.Tensor):
        return (torch.exp(torch.clamp(d_ap / cfg.sigma, max=EXP_CLAMP))
                - torch.exp(torch.clamp(d_an / cfg.sigma, max=EXP_CLAMP)) + cfg.margin)
    return (np.exp(np.minimum(d_ap / cfg.sigma, EXP_CLAMP))
            - np.exp(np.minimum(d_an / cfg.sigma, EXP_CLAMP)) + cfg.margin)


def mine_triplets(embeddings: torch.Tensor, labels, cfg: TripletConfig,
                  rng: np.random.Generator) -> TripletBatch:
    """
    For every ordered same-label (anchor, positive) pair, draw one negative
    uniformly from the margin violators; pairs without violators are skipped.
    """
    dist = pairwise_sq_dist(embeddings.detach().to(torch.float64)).cpu().numpy()
    labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    n = len(labels)
    triplets = []
    for a in range(n):
        negatives = np.flatnonzero(labels != labels[a])
        if len(negatives) == 0:
            continue
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            violating = negatives[_focal_terms(dist[a, p], dist[a, negatives], cfg) > 0]
            if len(violating) == 0:
                continue
            neg = int(violating[rng.integers(len(violating))])
            triplets.append((a, p, neg))
    return TripletBatch(triplets)


def triplet_focal_loss(triplets: TripletBatch, dist: torch.Tensor, cfg: TripletConfig) -> torch.Tensor:
    if len(triplets) == 0:
        return dist.sum() * 0.0
    a, p, n = triplets.index_tensors(device=dist.device)
    return F.relu(_focal_terms(dist[a, p], dist[a, n], cfg)).sum()


def mined_triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, cfg: TripletConfig,
                       rng: np.random.Generator) -> torch.Tensor:
    dist = pairwise_sq_dist(embeddings)
    return triplet_focal_loss(mine_triplets(embeddings, labels, cfg, rng), dist, cfg)


# ------------------------------------------------------------------ whitening
def instance_covariance(feats: torch.Tensor, epsilon: float = EPS) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, C) covariance of per-channel instance-normalised features."""
    n, c, h, w = feats.shape
    hw = h * w
    if hw < 2:
        raise ValueError("covariance needs at least two spatial positions")
    z = feats.reshape(n, c, hw)
    mu = z.mean(dim=2, keepdim=True)
    sd = z.std(dim=2, unbiased=False, keepdim=True)
    z = (z - mu) / (sd + epsilon)
    return torch.bmm(z, z.transpose(1, 2)) / hw


def style_sensitive_entries(cov_org: torch.Tensor, cov_aug: torch.Tensor, k: float) -> torch.Tensor:
    """
    Flat indices (into the strictly-upper triangle) of the ceil(k * E) entries
    with the largest |Σ_org - Σ_aug|; ties go to the lower index.
    """
    c = cov_org.shape[-1]
    rows, cols = torch.triu_indices(c, c, offset=1, device=cov_org.device)
    gap = (cov_org[rows, cols] - cov_aug[rows, cols]).abs().detach()
    count = max(1, math.ceil(k * gap.numel()))
    order = torch.sort(gap, descending=True, stable=True).indices
    return order[:count]


def aiaw_components(f_org: torch.Tensor, f_aug: torch.Tensor, labels: torch.Tensor,
                    cfg: AiawConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """The t=org and t=aug terms, each averaged over the batch."""
    if f_org.shape != f_aug.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_org.shape)} vs {tuple(f_aug.shape)}")
    cov_org = instance_covariance(f_org, cfg.epsilon)
    cov_aug = instance_covariance(f_aug, cfg.epsilon)
    c = cov_org.shape[-1]
    rows, cols = torch.triu_indices(c, c, offset=1, device=f_org.device)

    org_terms, aug_terms = [], []
    for i in range(f_org.shape[0]):
        k = cfg.k_attack if int(labels[i]) == 1 else cfg.k_live
        sel = style_sensitive_entries(cov_org[i], cov_aug[i], k)
        r, cc = rows[sel], cols[sel]
        org_terms.append(cov_org[i][r, cc].abs().mean())
        aug_terms.append(cov_aug[i][r, cc].abs().mean())
    return torch.stack(org_terms).mean(), torch.stack(aug_terms).mean()


def aiaw_loss(f_org: torch.Tensor, f_aug: torch.Tensor, labels: torch.Tensor,
              cfg: AiawConfig) -> torch.Tensor:
    org, aug = aiaw_components(f_org, f_aug, labels, cfg)
    return 0.5 * (org + aug)


# ------------------------------------------------------------------ composites
@dataclass
class Phase1Parts:
    aiaw_org: torch.Tensor
    tf_org: torch.Tensor
    ce_org: torch.Tensor
    aiaw_aug: torch.Tensor
    tf_aug: torch.Tensor
    ce_aug: torch.Tensor

    def as_dict(self):
        return {k: v.detach().item() for k, v in self.__dict__.items()}


def phase1_total_loss(parts: Phase1Parts, w: LossWeights) -> torch.Tensor:
    return (w.alpha1 * parts.aiaw_org + w.beta1 * parts.tf_org + w.gamma1 * parts.ce_org
            + w.alpha2 * parts.aiaw_aug + w.beta2 * parts.tf_aug + w.gamma2 * parts.ce_aug)


def patch_loss(ce, tf, w: LossWeights):
    return w.alpha * ce + w.beta * tf
