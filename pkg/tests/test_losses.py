import itertools
import warnings
import math

import numpy as np
import pytest
import torch

from losses import (
    AiawConfig, LossWeights, Phase1Parts, TripletBatch, TripletConfig, aiaw_components, aiaw_loss,
    instance_covariance, mine_triplets, pairwise_sq_dist, patch_loss, phase1_total_loss,
    style_sensitive_entries, triplet_focal_loss,
)

CFG = TripletConfig(margin=0.6, sigma=2.0)


def _focal(d_ap, d_an, cfg=CFG):
    return math.exp(d_ap / cfg.sigma) - math.exp(d_an / cfg.sigma) + cfg.margin


def test_pairwise_distance_is_symmetric():
    emb = torch.randn(6, 5, dtype=torch.float64)
    d = pairwise_sq_dist(emb)
    assert torch.equal(d, d.T)
    assert torch.all(torch.diag(d) == 0)
    assert d[1, 4].item() == pytest.approx(float(((emb[1] - emb[4]) ** 2).sum()))


def test_mining_against_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 9))
        labels = rng.integers(0, 2, size=n)
        emb = torch.as_tensor(rng.normal(scale=0.7, size=(n, 4)))
        dist = pairwise_sq_dist(emb).numpy()
        batch = mine_triplets(emb, labels, CFG, np.random.default_rng(trial))
        batch.validate(labels)

        expected_pairs = set()
        for a, p in itertools.permutations(range(n), 2):
            if labels[a] != labels[p]:
                continue
            if any(labels[m] != labels[a] and _focal(dist[a, p], dist[a, m]) > 0 for m in range(n)):
                expected_pairs.add((a, p))
        mined_pairs = [(a, p) for a, p, _ in batch.triplets]
        assert sorted(mined_pairs) == sorted(expected_pairs)

        total = 0.0
        for a, p, m in batch.triplets:
            term = _focal(dist[a, p], dist[a, m])
            assert term > 0
            total += term
        loss = triplet_focal_loss(batch, pairwise_sq_dist(emb), CFG)
        assert loss.item() == pytest.approx(total, rel=1e-6, abs=1e-9)


def test_no_violators_gives_zero_with_gradient():
    emb = torch.tensor([[0.0, 0.0], [0.0, 0.01], [9.0, 9.0], [9.0, 9.01]], requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1])
    batch = mine_triplets(emb, labels, CFG, np.random.default_rng(0))
    assert len(batch) == 0
    loss = triplet_focal_loss(batch, pairwise_sq_dist(emb), CFG)
    loss.backward()
    assert loss.item() == 0.0
    assert emb.grad is not None


def test_single_class_batch_mines_nothing():
    emb = torch.randn(4, 3)
    assert len(mine_triplets(emb, [1, 1, 1, 1], CFG, np.random.default_rng(0))) == 0


def test_invalid_triplet_rejected():
    with pytest.raises(ValueError):
        TripletBatch([(0, 1, 2)]).validate([0, 1, 1])


def test_triplet_gradcheck():
    emb = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    batch = TripletBatch([(0, 1, 3), (1, 0, 4), (3, 4, 2)])
    cfg = TripletConfig(margin=50.0, sigma=2.0)
    assert torch.autograd.gradcheck(lambda e: triplet_focal_loss(batch, pairwise_sq_dist(e), cfg), (emb,))


def test_instance_covariance_diagonal_is_near_one():
    feats = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    cov = instance_covariance(feats)
    assert cov.shape == (2, 4, 4)
    torch.testing.assert_close(cov, cov.transpose(1, 2))
    torch.testing.assert_close(torch.diagonal(cov, dim1=1, dim2=2),
                               torch.ones(2, 4, dtype=torch.float64), atol=1e-3, rtol=0)


def test_covariance_needs_two_positions():
    with pytest.raises(ValueError):
        instance_covariance(torch.randn(1, 3, 1, 1))


def test_style_sensitive_entries_match_sort():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(3, 8))
        a = torch.as_tensor(rng.normal(size=(c, c)))
        b = torch.as_tensor(rng.normal(size=(c, c)))
        k = float(rng.uniform(0.01, 1.0))
        rows, cols = np.triu_indices(c, k=1)
        gap = np.abs(a.numpy()[rows, cols] - b.numpy()[rows, cols])
        count = max(1, math.ceil(k * len(gap)))
        expected = np.argsort(-gap, kind="stable")[:count]
        got = style_sensitive_entries(a, b, k).numpy()
        assert sorted(got.tolist()) == sorted(expected.tolist())


def test_aiaw_against_numpy():
    rng = np.random.default_rng(5)
    f_org = torch.as_tensor(rng.normal(size=(3, 4, 3, 3)))
    f_aug = torch.as_tensor(rng.normal(size=(3, 4, 3, 3)))
    labels = torch.tensor([0, 1, 1])
    cfg = AiawConfig(k_live=0.5, k_attack=0.2)

    def cov(x):
        z = x.reshape(x.shape[0], -1)
        z = (z - z.mean(axis=1, keepdims=True)) / (z.std(axis=1, keepdims=True) + cfg.epsilon)
        return z @ z.T / z.shape[1]

    rows, cols = np.triu_indices(4, k=1)
    org_terms, aug_terms = [], []
    for i in range(3):
        co, ca = cov(f_org[i].numpy()), cov(f_aug[i].numpy())
        k = cfg.k_attack if labels[i] == 1 else cfg.k_live
        count = max(1, math.ceil(k * len(rows)))
        sel = np.argsort(-np.abs(co[rows, cols] - ca[rows, cols]), kind="stable")[:count]
        org_terms.append(np.abs(co[rows[sel], cols[sel]]).mean())
        aug_terms.append(np.abs(ca[rows[sel], cols[sel]]).mean())

    org, aug = aiaw_components(f_org, f_aug, labels, cfg)
    assert org.item() == pytest.approx(np.mean(org_terms), rel=1e-6)
    assert aug.item() == pytest.approx(np.mean(aug_terms), rel=1e-6)
    assert aiaw_loss(f_org, f_aug, labels, cfg).item() == pytest.approx(
        0.5 * (np.mean(org_terms) + np.mean(aug_terms)), rel=1e-6)


def test_aiaw_gradcheck():
    torch.manual_seed(0)
    f_org = torch.randn(2, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    f_aug = torch.randn(2, 3, 3, 3, dtype=torch.float64)
    labels = torch.tensor([0, 1])
    cfg = AiawConfig(k_live=0.5, k_attack=0.5)
    assert torch.autograd.gradcheck(lambda f: aiaw_loss(f, f_aug, labels, cfg), (f_org,))


def test_aiaw_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        aiaw_loss(torch.randn(1, 3, 2, 2), torch.randn(1, 3, 3, 3), torch.tensor([0]), AiawConfig())


def test_weighted_sums():
    parts = Phase1Parts(*[torch.tensor(float(v)) for v in (1, 2, 3, 4, 5, 6)])
    w = LossWeights(alpha1=0.5, beta1=0.25, gamma1=2.0, alpha2=1.0, beta2=0.0, gamma2=3.0)
    assert phase1_total_loss(parts, w).item() == pytest.approx(0.5 + 0.5 + 6 + 4 + 0 + 18)
    assert patch_loss(torch.tensor(2.0), torch.tensor(4.0), LossWeights()).item() == pytest.approx(2.4)


def test_default_weights():
    w = LossWeights()
    assert (w.alpha1, w.beta1, w.gamma1, w.alpha2, w.beta2, w.gamma2) == (1.0, 0.1, 1.0, 1.0, 0.1, 1.0)
    assert (w.alpha, w.beta) == (1.0, 0.1)


def test_aiaw_invariant_to_spatial_permutation():
    torch.manual_seed(4)
    f_org = torch.randn(3, 6, 4, 5, dtype=torch.float64)
    f_aug = torch.randn(3, 6, 4, 5, dtype=torch.float64)
    labels = torch.tensor([0, 1, 1])
    cfg = AiawConfig(k_live=0.3, k_attack=0.2)
    perm = torch.randperm(20)

    def shuffle(f):
        return f.flatten(2)[:, :, perm].reshape(f.shape)

    base = aiaw_loss(f_org, f_aug, labels, cfg).item()
    assert aiaw_loss(shuffle(f_org), shuffle(f_aug), labels, cfg).item() == pytest.approx(base, rel=1e-10)


def test_triplet_focal_loss_is_monotone_in_distance_gap():
    batch = TripletBatch([(0, 1, 2)])

    def loss(d_ap, d_an):
        dist = torch.zeros(3, 3, dtype=torch.float64)
        dist[0, 1], dist[0, 2] = d_ap, d_an
        return triplet_focal_loss(batch, dist, CFG).item()

    grid = np.linspace(0.0, 6.0, 25)
    rising = [loss(d, 2.0) for d in grid]
    falling = [loss(1.0, d) for d in grid]
    assert all(b >= a for a, b in zip(rising, rising[1:]))
    assert all(b <= a for a, b in zip(falling, falling[1:]))
    assert rising[-1] > rising[0] and falling[0] > falling[-1]


def test_phase1_composite_gradcheck():
    torch.manual_seed(5)
    labels = torch.tensor([0, 0, 1, 1])
    batch = TripletBatch([(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)])
    cfg = TripletConfig(margin=50.0, sigma=2.0)
    aiaw_cfg = AiawConfig(k_live=0.5, k_attack=0.4)
    weights = LossWeights(alpha1=1.0, beta1=0.1, gamma1=1.0, alpha2=0.7, beta2=0.2, gamma2=0.5)
    inputs = (
        torch.randn(4, 3, 3, 3, dtype=torch.float64, requires_grad=True),   # F_org
        torch.randn(4, 3, 3, 3, dtype=torch.float64, requires_grad=True),   # F_aug
        torch.randn(4, 5, dtype=torch.float64, requires_grad=True),         # embeddings, org
        torch.randn(4, 5, dtype=torch.float64, requires_grad=True),         # embeddings, aug
        torch.randn(4, 2, dtype=torch.float64, requires_grad=True),         # logits, org
        torch.randn(4, 2, dtype=torch.float64, requires_grad=True),         # logits, aug
    )

    def total(f_org, f_aug, e_org, e_aug, l_org, l_aug):
        aiaw_org, aiaw_aug = aiaw_components(f_org, f_aug, labels, aiaw_cfg)
        parts = Phase1Parts(
            aiaw_org=aiaw_org, tf_org=triplet_focal_loss(batch, pairwise_sq_dist(e_org), cfg),
            ce_org=torch.nn.functional.cross_entropy(l_org, labels),
            aiaw_aug=aiaw_aug, tf_aug=triplet_focal_loss(batch, pairwise_sq_dist(e_aug), cfg),
            ce_aug=torch.nn.functional.cross_entropy(l_aug, labels),
        )
        return phase1_total_loss(parts, weights)

    assert torch.autograd.gradcheck(total, inputs)


def test_parts_as_dict_detaches():
    x = torch.tensor(2.0, requires_grad=True)
    parts = Phase1Parts(*[x * v for v in (1, 2, 3, 4, 5, 6)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = parts.as_dict()
    assert out == {"aiaw_org": 2.0, "tf_org": 4.0, "ce_org": 6.0, "aiaw_aug": 8.0, "tf_aug": 10.0,
                   "ce_aug": 12.0}
    assert all(type(v) is float for v in out.values())
