"""Small dense classifiers with an explicit representation/head split.

Parameters live in one flat float64 vector so whole-model gradient steps are
single vector operations on the tape.  The layout keeps every encoder block
before the head block, which makes head-only fine-tuning a contiguous
trailing slice of the parameter vector.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_MAGIC = b"MMCK"
_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class ArchSpec:
    """Dense architecture: flattened input -> hidden widths -> embedding -> classes.

    input_scale is applied to pixels before the first layer; attacks and data
    stay on the [0, 255] scale, the network sees well-conditioned values.
    """

    input_dims: tuple          # (height, width, channels)
    hidden: tuple
    n_classes: int
    embed_dim: int
    activation: str = "tanh"
    input_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.input_dims) != 3 or any(d <= 0 for d in self.input_dims):
            raise ValueError(f"input_dims must be 3 positive extents, got {self.input_dims}")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c


def _build_layout(spec: ArchSpec):
    layout = []
    dims = [spec.input_size, *spec.hidden, spec.embed_dim]
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        layout.append((f"enc{i}.W", (fi, fo), "representation"))
        layout.append((f"enc{i}.b", (fo,), "representation"))
    layout.append(("head.W", (spec.embed_dim, spec.n_classes), "head"))
    layout.append(("head.b", (spec.n_classes,), "head"))
    return layout


class MetaModel:
    """Immutable bundle of (arch_spec, flat params, layout).

    Encoder parameters occupy params[:head_start], head parameters the rest.
    """

    def __init__(self, arch_spec: ArchSpec, params: np.ndarray, layout=None):
        self.arch_spec = arch_spec
        self.layout = list(layout) if layout is not None else _build_layout(arch_spec)
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        total = sum(int(np.prod(s)) for _, s, _ in self.layout)
        if self.params.ndim != 1 or self.params.size != total:
            raise ValueError(f"params length {self.params.size} does not match layout total {total}")
        tags = {t for _, _, t in self.layout}
        if not tags <= {"representation", "head"}:
            raise ValueError(f"unknown block tags {tags}")
        self.head_start = sum(int(np.prod(s)) for _, s, t in self.layout if t == "representation")

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "MetaModel":
        return MetaModel(self.arch_spec, params, self.layout)

    def __repr__(self):
        return (f"MetaModel(input={self.arch_spec.input_dims}, hidden={self.arch_spec.hidden}, "
                f"embed={self.arch_spec.embed_dim}, classes={self.arch_spec.n_classes}, "
                f"n_params={self.n_params})")


def init_model(spec: ArchSpec, seed: int) -> MetaModel:
    """Uniform init in [-s, s] with s = 1/sqrt(fan_in), deterministic under seed."""
    rng = np.random.default_rng(seed)
    layout = _build_layout(spec)
    parts = []
    for name, shape, _tag in layout:
        fan_in = shape[0] if len(shape) == 2 else _bias_fan_in(layout, name)
        s = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-s, s, size=int(np.prod(shape))))
    return MetaModel(spec, np.concatenate(parts), layout)


def _bias_fan_in(layout, bias_name):
    # bias entries follow their weight matrix; reuse its fan_in
    for name, shape, _ in layout:
        if name == bias_name.replace(".b", ".W"):
            return shape[0]
    raise KeyError(bias_name)


def _params_tensor(model: MetaModel, params):
    if params is None:
        return ad.constant(model.params)
    if isinstance(params, ad.Tensor):
        if params.data.size != model.n_params:
            raise ValueError("params tensor length does not match model layout")
        return params
    return ad.constant(np.asarray(params, dtype=np.float64))


def _input_tensor(model: MetaModel, x):
    t = x if isinstance(x, ad.Tensor) else ad.constant(x)
    d = model.arch_spec.input_size
    if t.data.ndim == 2 and t.data.shape[1] == d:
        return t
    if t.data.ndim == 4 and t.data.shape[1:] == model.arch_spec.input_dims:
        return ad.reshape(t, (t.data.shape[0], d))
    raise ValueError(
        f"input shape {t.data.shape} incompatible with input_dims "
        f"{model.arch_spec.input_dims}")


def _unpack(model: MetaModel, p: ad.Tensor):
    blocks = {}
    ofs = 0
    for name, shape, _tag in model.layout:
        n = int(np.prod(shape))
        blocks[name] = ad.reshape(ad.slice1d(p, ofs, ofs + n), shape)
        ofs += n
    return blocks


def representation(model: MetaModel, x, params=None) -> ad.Tensor:
    """Encoder output [batch, embed_dim]; the final embedding layer is linear."""
    p = _params_tensor(model, params)
    t = _input_tensor(model, x)
    if model.arch_spec.input_scale != 1.0:
        t = t * model.arch_spec.input_scale
    blocks = _unpack(model, p)
    act = _ACTIVATIONS[model.arch_spec.activation]
    n_enc = len(model.arch_spec.hidden) + 1
    for i in range(n_enc):
        W, b = blocks[f"enc{i}.W"], blocks[f"enc{i}.b"]
        t = ad.matmul(t, W) + ad.reshape(b, (1, b.data.size))
        if i < n_enc - 1:
            t = act(t)
    return t


def logits(model: MetaModel, x, params=None) -> ad.Tensor:
    p = _params_tensor(model, params)
    rep = representation(model, x, p)
    blocks = _unpack(model, p)
    W, b = blocks["head.W"], blocks["head.b"]
    return ad.matmul(rep, W) + ad.reshape(b, (1, b.data.size))


def cross_entropy(logits_t: ad.Tensor, labels) -> ad.Tensor:
    """Mean negative log-softmax of the true class; always > 0 for finite logits."""
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits_t.data.shape[0]:
        raise ValueError("labels must be a vector matching the batch dimension")
    n_classes = logits_t.data.shape[1]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels out of range [0, {n_classes})")
    y = y.astype(np.int64)
    # shift by the detached row max; log-sum-exp is shift invariant so the
    # gradient (and its gradient) are unaffected
    m = ad.max_reduce(logits_t, axis=1, keepdims=True).detach()
    z = logits_t - m
    lse = ad.log(ad.tsum(ad.exp(z), axis=1))
    return ad.tmean(lse - ad.take_per_row(z, y))


def accuracy(logits_t: ad.Tensor, labels) -> float:
    pred = np.argmax(logits_t.data, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Checkpoints.  Byte layout (all integers little-endian):
#   bytes 0..3   magic b"MMCK"
#   bytes 4..7   uint32 version (currently 1)
#   bytes 8..11  uint32 header length H
#   bytes 12..12+H  UTF-8 JSON header: {"arch": {...}, "layout": [[name, shape,
#                   tag], ...], "n_params": N}
#   remainder    N little-endian float64 parameter values
# ---------------------------------------------------------------------------

def save_model(model: MetaModel, path) -> None:
    header = {
        "arch": {
            "input_dims": list(model.arch_spec.input_dims),
            "hidden": list(model.arch_spec.hidden),
            "n_classes": model.arch_spec.n_classes,
            "embed_dim": model.arch_spec.embed_dim,
            "activation": model.arch_spec.activation,
            "input_scale": model.arch_spec.input_scale,
        },
        "layout": [[name, list(shape), tag] for name, shape, tag in model.layout],
        "n_params": model.n_params,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        f.write(model.params.astype("<f8").tobytes())


def load_model(path) -> MetaModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    arch = header["arch"]
    spec = ArchSpec(
        input_dims=tuple(arch["input_dims"]),
        hidden=tuple(arch["hidden"]),
        n_classes=int(arch["n_classes"]),
        embed_dim=int(arch["embed_dim"]),
        activation=arch["activation"],
        input_scale=float(arch["input_scale"]),
    )
    layout = [(name, tuple(shape), tag) for name, shape, tag in header["layout"]]
    params = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError("checkpoint payload length does not match header")
    return MetaModel(spec, params, layout)
