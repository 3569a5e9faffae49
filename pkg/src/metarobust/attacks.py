"""Linf-bounded input perturbations: multi-step PGD and one-step fast FGSM.

Epsilon is measured in intensity levels on the [0, 255] data scale (so
epsilon=2 means each pixel may move by at most 2 levels).  Every attack
returns a detached perturbation tensor: downstream losses treat delta as a
constant and differentiate only through the model parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 10
    step_size: float | None = None   # default: 2.5*eps/steps (PGD), 1.25*eps (FGSM)
    random_init: bool = True
    kind: str = "pgd"
    raw_grad: bool = False           # FGSM only: literal eps*grad form instead of sign

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.kind not in ("pgd", "fgsm"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "fgsm" and self.steps != 1:
            raise ValueError("fgsm is single-step; set steps=1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.raw_grad and self.kind != "fgsm":
            raise ValueError("raw_grad applies to fgsm only")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind == "fgsm":
            return 1.25 * self.epsilon
        return 2.5 * self.epsilon / max(self.steps, 1)


DATA_MIN, DATA_MAX = 0.0, 255.0


def _as_rng(rng):
    if rng is None:
        return np.random.default_rng(0)
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _project(delta, x, eps):
    # intersection of the eps-ball around x and the data box; passes delta
    # through exactly when the box is slack (no x+d-x round trip), and nudges
    # by ulps where the float sum x + (bound - x) overshoots the bound
    d = np.clip(delta, -eps, eps)
    d = np.minimum(d, DATA_MAX - x)
    d = np.maximum(d, DATA_MIN - x)
    for _ in range(3):
        over = x + d > DATA_MAX
        under = x + d < DATA_MIN
        if not (over.any() or under.any()):
            break
        d = np.where(over, np.nextafter(d, -np.inf), d)
        d = np.where(under, np.nextafter(d, np.inf), d)
    return d


def _grad_wrt_delta(loss_fn, delta, step_index):
    d = ad.leaf(delta)
    loss = loss_fn(d)
    (g,) = ad.grad(loss, [d])
    if not np.all(np.isfinite(g.data)):
        raise FloatingPointError(
            f"non-finite attack gradient at step {step_index}")
    return g.data


def pgd_attack(loss_fn, x, cfg: AttackConfig, rng=None) -> ad.Tensor:
    """Sign-ascent PGD: cfg.steps steps of step_size*sign(grad), each followed
    by projection onto the eps-ball intersected with the data range."""
    if cfg.kind != "pgd":
        raise ValueError("pgd_attack requires kind='pgd'")
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return ad.constant(np.zeros_like(x))
    gen = _as_rng(rng)
    if cfg.random_init:
        delta = gen.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        delta = _project(delta, x, cfg.epsilon)
    else:
        delta = np.zeros_like(x)
    step = cfg.resolved_step_size()
    for k in range(cfg.steps):
        g = _grad_wrt_delta(loss_fn, delta, k)
        delta = _project(delta + step * np.sign(g), x, cfg.epsilon)
    return ad.constant(delta)


def fgsm_attack(loss_fn, x, cfg: AttackConfig, rng=None) -> ad.Tensor:
    """One gradient evaluation from a random start inside the ball.

    Default form: delta = clip(delta0 + step*sign(grad)).  The raw_grad flag
    switches to delta = clip(delta0 + eps*grad), which is not scale invariant
    but matches a literal reading of the one-step update.
    """
    if cfg.kind != "fgsm":
        raise ValueError("fgsm_attack requires kind='fgsm'")
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    if cfg.epsilon == 0.0:
        return ad.constant(np.zeros_like(x))
    gen = _as_rng(rng)
    if cfg.random_init:
        delta0 = gen.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        delta0 = _project(delta0, x, cfg.epsilon)
    else:
        delta0 = np.zeros_like(x)
    g = _grad_wrt_delta(loss_fn, delta0, 0)
    if cfg.raw_grad:
        move = cfg.epsilon * g
    else:
        move = cfg.resolved_step_size() * np.sign(g)
    return ad.constant(_project(delta0 + move, x, cfg.epsilon))


def run_attack(loss_fn, x, cfg: AttackConfig, rng=None) -> ad.Tensor:
    if cfg.kind == "fgsm":
        return fgsm_attack(loss_fn, x, cfg, rng)
    return pgd_attack(loss_fn, x, cfg, rng)
