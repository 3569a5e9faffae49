"""Multi-view batches and the softmax-over-similarities auxiliary loss.

Positives come from label-preserving image transforms or from adversarial
examples; every other view in the batch acts as a negative.  Representations
are L2-normalized before the dot product by default, since the raw-dot-product
form diverges under representation scaling (flag-selectable).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import AttackConfig
from .regularizers import at_delta, RobustSpec

_KNOWN = ("crop_resize", "cutout", "rotation")


@dataclass(frozen=True)
class TransformConfig:
    enabled: tuple = ("crop_resize", "cutout", "rotation")
    crop_scale: tuple = (0.6, 1.0)
    cutout_size: int = 4
    angles: tuple = (0, 90, 180, 270)
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.enabled) - set(_KNOWN)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
        if not (0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.cutout_size < 1:
            raise ValueError("cutout_size must be >= 1")
        if any(a % 90 != 0 for a in self.angles):
            raise ValueError("angles must be multiples of 90 degrees")


@dataclass(frozen=True)
class ViewBatch:
    anchors: np.ndarray      # [B, D] flattened
    positives: np.ndarray    # [B, D], pair (i, i)
    provenance: tuple        # per-pair tag: "transform" or "adversarial"


def _crop_resize(img, rng, scale_range):
    h, w = img.shape[:2]
    s = rng.uniform(*scale_range)
    ch, cw = max(1, int(round(s * h))), max(1, int(round(s * w)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[top:top + ch, left:left + cw]
    # nearest-neighbor resize back to (h, w): keeps the pixel value set intact
    ri = np.minimum((np.arange(h) * ch) // h, ch - 1)
    ci = np.minimum((np.arange(w) * cw) // w, cw - 1)
    return crop[np.ix_(ri, ci)]


def _cutout(img, rng, size, fill):
    h, w = img.shape[:2]
    m = min(size, h, w)
    top = int(rng.integers(0, h - m + 1))
    left = int(rng.integers(0, w - m + 1))
    out = img.copy()
    out[top:top + m, left:left + m] = fill
    return out


def _rotate(img, rng, angles):
    a = int(rng.choice(angles)) % 360
    return np.rot90(img, k=a // 90, axes=(0, 1)).copy()


def make_views(batch: np.ndarray, tcfg: TransformConfig, image_dims) -> ViewBatch:
    """One stochastic positive per anchor; deterministic under tcfg.seed."""
    h, w, c = image_dims
    x = np.asarray(batch, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != h * w * c:
        raise ValueError("batch does not match image_dims")
    imgs = flat.reshape(-1, h, w, c)
    fill = float(flat.mean())
    out = np.empty_like(imgs)
    for i in range(imgs.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, i]))
        v = imgs[i]
        if "crop_resize" in tcfg.enabled:
            v = _crop_resize(v, rng, tcfg.crop_scale)
        if "cutout" in tcfg.enabled:
            v = _cutout(v, rng, tcfg.cutout_size, fill)
        if "rotation" in tcfg.enabled:
            v = _rotate(v, rng, tcfg.angles)
        out[i] = v
    return ViewBatch(anchors=flat.copy(), positives=out.reshape(flat.shape),
                     provenance=("transform",) * flat.shape[0])


def adversarial_views(model, batch, attack: AttackConfig, params=None, rng=None) -> np.ndarray:
    """Task-loss adversarial examples of a labeled batch, used as extra views."""
    x, y = batch
    spec = RobustSpec(kind="at", gamma=1.0, attack=attack)
    delta = at_delta(model, x, y, spec, params=params, rng=rng)
    return np.asarray(x, dtype=np.float64) + delta.data


def paired_indices(n_rows: int) -> np.ndarray:
    """Positive map for a [anchors; positives] stack of 2B rows."""
    if n_rows % 2 != 0:
        raise ValueError("stacked view batch must have an even row count")
    b = n_rows // 2
    return np.concatenate([np.arange(b) + b, np.arange(b)])


def contrastive_loss(reps: ad.Tensor, pairing, tau: float, normalize: bool = True) -> ad.Tensor:
    """Mean over anchors of -log( e^{s_ap} / sum_{j != a} e^{s_aj} ), s = sim/tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = reps if isinstance(reps, ad.Tensor) else ad.constant(np.asarray(reps, dtype=np.float64))
    n = r.data.shape[0]
    if n < 2:
        raise ValueError("need at least 2 views (no negatives otherwise)")
    idx = np.asarray(pairing, dtype=np.int64)
    if idx.shape != (n,) or np.any(idx < 0) or np.any(idx >= n):
        raise ValueError("pairing must map every row to a valid row")
    if np.any(idx == np.arange(n)):
        raise ValueError("a view cannot be its own positive")
    if normalize:
        norm = ad.sqrt(ad.tsum(r * r, axis=1, keepdims=True) + 1e-12)
        r = r / norm
    sims = ad.matmul(r, ad.transpose(r)) * (1.0 / tau)
    m = ad.max_reduce(sims, axis=1, keepdims=True).detach()
    s = sims - m
    mask = ad.constant(1.0 - np.eye(n))
    denom = ad.tsum(ad.exp(s) * mask, axis=1)
    return ad.tmean(ad.log(denom) - ad.take_per_row(s, idx))
