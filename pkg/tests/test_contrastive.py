"""View generation and the similarity-softmax loss against closed-form oracles."""

import numpy as np
import pytest

from metarobust import autodiff as ad
from metarobust import contrastive, models
from metarobust.attacks import AttackConfig
from metarobust.contrastive import TransformConfig


DIMS = (8, 8, 1)


def _batch(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return np.round(rng.uniform(0, 255, size=(n, 64)))


def test_config_validation():
    with pytest.raises(ValueError):
        TransformConfig(enabled=("blur",))
    with pytest.raises(ValueError):
        TransformConfig(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        TransformConfig(angles=(45,))
    with pytest.raises(ValueError):
        TransformConfig(cutout_size=0)


def test_empty_transform_set_is_identity():
    vb = contrastive.make_views(_batch(), TransformConfig(enabled=()), DIMS)
    assert np.array_equal(vb.positives, vb.anchors)
    assert vb.provenance == ("transform",) * 6


def test_zero_rotation_is_identity():
    vb = contrastive.make_views(_batch(), TransformConfig(enabled=("rotation",),
                                                          angles=(0,)), DIMS)
    assert np.array_equal(vb.positives, vb.anchors)


def test_cutout_masks_exact_square_to_batch_mean():
    # two constant images at 0 and 255: batch mean is 127.5, so every masked
    # pixel changes and the changed count equals the configured square area
    x = np.stack([np.zeros(64), np.full(64, 255.0)])
    tcfg = TransformConfig(enabled=("cutout",), cutout_size=3, seed=1)
    vb = contrastive.make_views(x, tcfg, DIMS)
    for i in range(2):
        changed = vb.positives[i] != vb.anchors[i]
        assert changed.sum() == 9
        assert np.all(vb.positives[i][changed] == 127.5)


def test_crop_resize_preserves_value_set_and_range():
    x = _batch(8, seed=3)
    tcfg = TransformConfig(enabled=("crop_resize",), crop_scale=(0.5, 0.9), seed=2)
    vb = contrastive.make_views(x, tcfg, DIMS)
    assert vb.positives.shape == x.shape
    for i in range(8):
        assert set(np.unique(vb.positives[i])) <= set(np.unique(x[i]))


def test_make_views_deterministic():
    x = _batch(5, seed=4)
    tcfg = TransformConfig(seed=11)
    a = contrastive.make_views(x, tcfg, DIMS)
    b = contrastive.make_views(x, tcfg, DIMS)
    assert np.array_equal(a.positives, b.positives)
    c = contrastive.make_views(x, TransformConfig(seed=12), DIMS)
    assert not np.array_equal(a.positives, c.positives)


def test_views_stay_in_pixel_range():
    x = _batch(10, seed=5)
    vb = contrastive.make_views(x, TransformConfig(seed=3), DIMS)
    assert vb.positives.min() >= 0.0 and vb.positives.max() <= 255.0


def test_paired_indices_layout():
    p = contrastive.paired_indices(6)
    assert p.tolist() == [3, 4, 5, 0, 1, 2]
    with pytest.raises(ValueError):
        contrastive.paired_indices(5)


@pytest.mark.parametrize("m", [1, 2, 7])
def test_identical_reps_give_log_one_plus_m(m):
    n = m + 2
    reps = np.tile(np.array([0.3, -0.7, 0.2]), (n, 1))
    pairing = (np.arange(n) + 1) % n
    loss = contrastive.contrastive_loss(ad.constant(reps), pairing, tau=0.5)
    assert abs(loss.item() - np.log(1 + m)) < 1e-10


def test_loss_matches_direct_recomputation():
    # 4 unit vectors at hand-set angles, tau=1, normalized path
    angles = np.array([0.0, 0.4, 1.9, 3.0])
    reps = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pairing = np.array([1, 0, 3, 2])
    got = contrastive.contrastive_loss(ad.constant(reps), pairing, tau=1.0).item()

    rn = reps / np.sqrt((reps ** 2).sum(axis=1, keepdims=True) + 1e-12)
    S = rn @ rn.T
    total = 0.0
    for a in range(4):
        num = np.exp(S[a, pairing[a]])
        den = sum(np.exp(S[a, j]) for j in range(4) if j != a)
        total += -np.log(num / den)
    assert abs(got - total / 4) < 1e-10


def test_rotation_invariance():
    rng = np.random.default_rng(8)
    reps = rng.normal(size=(6, 5))
    pairing = contrastive.paired_indices(6)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a = contrastive.contrastive_loss(ad.constant(reps), pairing, tau=0.5).item()
    b = contrastive.contrastive_loss(ad.constant(reps @ q), pairing, tau=0.5).item()
    assert abs(a - b) < 1e-10


def test_loss_decreases_when_positive_similarity_rises():
    reps = np.array([[1.0, 0.0], [0.6, 0.8], [-0.5, 0.4], [0.1, -0.9]])
    pairing = np.array([1, 0, 3, 2])
    base = contrastive.contrastive_loss(ad.constant(reps), pairing, tau=1.0,
                                        normalize=False).item()
    closer = reps.copy()
    closer[1] = reps[1] + 0.2 * (reps[0] - reps[1])  # pull 1 toward its positive 0
    moved = contrastive.contrastive_loss(ad.constant(closer), pairing, tau=1.0,
                                         normalize=False).item()
    assert moved < base


def test_loss_nonnegative_and_validated():
    rng = np.random.default_rng(9)
    reps = rng.normal(size=(8, 4))
    pairing = contrastive.paired_indices(8)
    val = contrastive.contrastive_loss(ad.constant(reps), pairing, tau=0.5).item()
    assert val >= 0.0
    with pytest.raises(ValueError):
        contrastive.contrastive_loss(ad.constant(reps), pairing, tau=0.0)
    with pytest.raises(ValueError):
        contrastive.contrastive_loss(ad.constant(reps[:1]), np.array([0]), tau=1.0)
    with pytest.raises(ValueError):
        contrastive.contrastive_loss(ad.constant(reps), np.arange(8), tau=1.0)


def test_loss_gradient_matches_fd():
    rng = np.random.default_rng(10)
    reps0 = rng.normal(size=(4, 3))
    pairing = contrastive.paired_indices(4)

    def fn(r):
        return contrastive.contrastive_loss(r, pairing, tau=0.7)

    assert ad.finite_diff_check(fn, [reps0], step=1e-5) < 1e-4


def test_adversarial_views_ball_and_identity():
    spec = models.ArchSpec(input_dims=DIMS, hidden=(6,), n_classes=3, embed_dim=4)
    m = models.init_model(spec, seed=0)
    rng = np.random.default_rng(11)
    x = np.round(rng.uniform(0, 255, size=(5, 64)))
    y = rng.integers(0, 3, size=5)

    same = contrastive.adversarial_views(m, (x, y), AttackConfig(epsilon=0.0, steps=1))
    assert np.array_equal(same, x)

    eps = 2.0
    adv = contrastive.adversarial_views(m, (x, y), AttackConfig(epsilon=eps, steps=3),
                                        rng=1)
    assert np.max(np.abs(adv - x)) <= eps + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 255.0
    assert not np.array_equal(adv, x)
