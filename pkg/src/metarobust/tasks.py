"""Episodic few-shot data: synthetic texture classes, samplers, file format.

Each synthetic class is a frequency/orientation-coded grating: class k gets a
distinct integer frequency pair (kx, ky), so any two base patterns are
near-orthogonal on the pixel grid and class identity is carried by texture,
not brightness.  Pixel noise controls task difficulty.  All pixel values are
integers in [0, 255] stored as float64, which makes the 8-bit file format a
lossless round trip.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

_MAGIC = b"MRDS"
_VERSION = 1


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    support: tuple            # (x [n_s, D], y [n_s])
    query: tuple              # (x [n_q, D], y [n_q])
    unlabeled: Optional[np.ndarray]   # [n_u, D] or None; carries no labels
    class_map: np.ndarray     # local label -> global class id


@dataclass(frozen=True)
class DatasetSource:
    kind: str                 # "synthetic" or "file"
    data: np.ndarray          # [classes, samples_per_class, h, w, c], float64 in [0,255]
    image_dims: tuple
    class_ids: tuple          # global identity of each class row
    generator_seed: Optional[int] = None
    noise_level: Optional[float] = None
    file_path: Optional[str] = None

    @property
    def classes(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_class(self) -> int:
        return self.data.shape[1]

    @property
    def flat_dim(self) -> int:
        h, w, c = self.image_dims
        return h * w * c


def _freq_pairs(n):
    # distinct (kx, ky) with kx >= 1 so no pair aliases another's conjugate
    pairs = []
    kx = 1
    while len(pairs) < n:
        for ky in range(0, 8):
            pairs.append((kx, ky))
            if len(pairs) == n:
                break
        kx += 1
    return pairs


def synth_dataset(classes: int, samples_per_class: int, dims=(16, 16, 1),
                  noise_level: float = 24.0, seed: int = 0) -> DatasetSource:
    if classes <= 0 or samples_per_class <= 0:
        raise ValueError("counts must be positive")
    h, w, c = dims
    pairs = _freq_pairs(classes)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    data = np.empty((classes, samples_per_class, h, w, c))
    for k in range(classes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        kx, ky = pairs[k]
        phase = rng.uniform(0, 2 * np.pi)
        base = 127.5 + 80.0 * np.cos(2 * np.pi * (kx * ii / h + ky * jj / w) + phase)
        noise = rng.normal(0.0, noise_level, size=(samples_per_class, h, w))
        batch = np.clip(np.round(base[None] + noise), 0, 255)
        data[k] = batch[..., None] if c == 1 else np.repeat(batch[..., None], c, axis=-1)
    return DatasetSource(kind="synthetic", data=data, image_dims=(h, w, c),
                         class_ids=tuple(range(classes)), generator_seed=seed,
                         noise_level=noise_level)


def base_patterns(src: DatasetSource) -> np.ndarray:
    """Per-class mean image; for synthetic data this recovers the grating."""
    return src.data.mean(axis=1)


def class_split(src: DatasetSource, n_train: int):
    """Disjoint class pools for meta-train and meta-test."""
    if not (0 < n_train < src.classes):
        raise ValueError(f"n_train must be in (0, {src.classes})")

    def subset(lo, hi):
        return DatasetSource(kind=src.kind, data=src.data[lo:hi],
                             image_dims=src.image_dims,
                             class_ids=src.class_ids[lo:hi],
                             generator_seed=src.generator_seed,
                             noise_level=src.noise_level, file_path=src.file_path)

    return subset(0, n_train), subset(n_train, src.classes)


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_episode(src: DatasetSource, way: int = 5, shot: int = 1,
                   query_per_class: int = 15, with_unlabeled: bool = False,
                   seed=0) -> Episode:
    need = shot + query_per_class
    if way > src.classes:
        raise ValueError(f"way={way} exceeds {src.classes} available classes")
    if need > src.samples_per_class:
        raise ValueError(
            f"need {need} samples per class, have {src.samples_per_class}")
    rng = _as_rng(seed)
    chosen = rng.choice(src.classes, size=way, replace=False)
    D = src.flat_dim
    xs = np.empty((way * shot, D))
    ys = np.empty(way * shot, dtype=np.int64)
    xq = np.empty((way * query_per_class, D))
    yq = np.empty(way * query_per_class, dtype=np.int64)
    used = np.zeros((src.classes, src.samples_per_class), dtype=bool)
    for local, ci in enumerate(chosen):
        idx = rng.choice(src.samples_per_class, size=need, replace=False)
        used[ci, idx] = True
        flat = src.data[ci, idx].reshape(need, D)
        xs[local * shot:(local + 1) * shot] = flat[:shot]
        ys[local * shot:(local + 1) * shot] = local
        xq[local * query_per_class:(local + 1) * query_per_class] = flat[shot:]
        yq[local * query_per_class:(local + 1) * query_per_class] = local
    unlabeled = None
    if with_unlabeled:
        free = np.flatnonzero(~used.reshape(-1))
        n_u = way * query_per_class
        if free.size < n_u:
            raise ValueError("not enough held-out samples for the unlabeled pool")
        pick = rng.choice(free, size=n_u, replace=False)
        ci, si = np.unravel_index(pick, used.shape)
        unlabeled = src.data[ci, si].reshape(n_u, D)
    return Episode(way=way, shot=shot, support=(xs, ys), query=(xq, yq),
                   unlabeled=unlabeled,
                   class_map=np.asarray([src.class_ids[c] for c in chosen]))


# ---------------------------------------------------------------------------
# Dataset file format.  Byte layout (integers little-endian):
#   bytes 0..3    magic b"MRDS"
#   bytes 4..7    uint32 version (1)
#   bytes 8..11   uint32 class count
#   bytes 12..15  uint32 samples per class
#   bytes 16..27  uint32 h, w, c
#   remainder     classes*samples*h*w*c unsigned 8-bit pixels, class-major
# ---------------------------------------------------------------------------

def write_file_dataset(src: DatasetSource, path) -> None:
    h, w, c = src.image_dims
    header = np.array([src.classes, src.samples_per_class, h, w, c], dtype="<u4")
    payload = np.round(src.data).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_VERSION).tobytes())
        f.write(header.tobytes())
        f.write(payload.tobytes())


def load_file_dataset(path) -> DatasetSource:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 28 or raw[:4] != _MAGIC:
        raise ValueError("not a dataset file (bad magic or short header)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    classes, spc, h, w, c = (int(v) for v in np.frombuffer(raw[8:28], dtype="<u4"))
    if classes == 0 or spc == 0 or h == 0 or w == 0 or c == 0:
        raise ValueError("dataset header has zero extent")
    expected = classes * spc * h * w * c
    actual = len(raw) - 28
    if actual != expected:
        raise ValueError(
            f"dataset payload truncated or padded: expected {expected} bytes, "
            f"found {actual}")
    data = np.frombuffer(raw[28:], dtype=np.uint8).astype(np.float64)
    data = data.reshape(classes, spc, h, w, c)
    return DatasetSource(kind="file", data=data, image_dims=(h, w, c),
                         class_ids=tuple(range(classes)), file_path=str(path))
