"""Robust regularization terms evaluated at adversarially perturbed inputs.

Two forms: the task loss itself at attacked points (adversarial training),
and the divergence between prediction distributions at clean vs attacked
points (label-free, so it also consumes unlabeled data).  Perturbations are
always generated against detached parameters and entered into the returned
value as constants; gradients flow through the model parameters only.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import AttackConfig, run_attack

INFINITY = math.inf


@dataclass(frozen=True)
class RobustSpec:
    kind: str                     # "at" or "trades"
    gamma: float                  # weight applied at point of use; may be inf
    attack: AttackConfig
    lam: float = 0.0              # weight of the clean loss inside robust_objective
    divergence: str = "kl"        # trades only: "kl" or "xent"

    def __post_init__(self):
        if self.kind not in ("at", "trades"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not (self.gamma >= 0):
            raise ValueError("gamma must be non-negative (or inf)")
        if self.divergence not in ("kl", "xent"):
            raise ValueError(f"unknown divergence {self.divergence!r}")


def _log_softmax(z: ad.Tensor) -> ad.Tensor:
    m = ad.max_reduce(z, axis=1, keepdims=True).detach()
    zs = z - m
    return zs - ad.log(ad.tsum(ad.exp(zs), axis=1, keepdims=True))


def _detached_params(model, params):
    if params is None:
        return ad.constant(model.params)
    return params.detach() if isinstance(params, ad.Tensor) else ad.constant(params)


def at_delta(model, x, y, spec: RobustSpec, params=None, rng=None) -> ad.Tensor:
    """Perturbation maximizing cross-entropy, generated against frozen params."""
    frozen = _detached_params(model, params)
    xc = ad.constant(np.asarray(x, dtype=np.float64))

    def loss_fn(d):
        return models.cross_entropy(models.logits(model, xc + d, frozen), y)

    return run_attack(loss_fn, xc, spec.attack, rng)


def at_regularizer(model, batch, spec: RobustSpec, params=None, rng=None,
                   delta=None) -> ad.Tensor:
    """Mean cross-entropy at x + delta*, differentiable w.r.t. params only."""
    if spec.kind != "at":
        raise ValueError("at_regularizer requires kind='at'")
    x, y = batch
    if delta is None:
        delta = at_delta(model, x, y, spec, params, rng)
    xa = ad.constant(np.asarray(x, dtype=np.float64)) + delta
    return models.cross_entropy(models.logits(model, xa, params), y)


def _divergence_rows(logp: ad.Tensor, p: ad.Tensor, logq: ad.Tensor, form: str) -> ad.Tensor:
    if form == "kl":
        return ad.tsum(p * (logp - logq), axis=1)
    return ad.tsum(p * (0.0 - logq), axis=1)  # cross-entropy form: differs by H(p)


def trades_delta(model, x, spec: RobustSpec, params=None, rng=None) -> ad.Tensor:
    """Perturbation maximizing the clean-vs-perturbed prediction divergence."""
    frozen = _detached_params(model, params)
    xc = ad.constant(np.asarray(x, dtype=np.float64))
    with ad.no_grad():
        z_clean = models.logits(model, xc, frozen)
        logp = _log_softmax(z_clean)
        p = ad.softmax(z_clean, axis=1)
    logp_c, p_c = ad.constant(logp.data), ad.constant(p.data)

    def loss_fn(d):
        logq = _log_softmax(models.logits(model, xc + d, frozen))
        return ad.tmean(_divergence_rows(logp_c, p_c, logq, spec.divergence))

    return run_attack(loss_fn, xc, spec.attack, rng)


def trades_regularizer(model, batch, spec: RobustSpec, params=None, rng=None,
                       delta=None) -> ad.Tensor:
    """Mean divergence between prediction distributions at x and x + delta*.

    Consumes no labels: a (x, y) batch and a bare x batch give identical
    values, which is what lets unlabeled data enter the objective.
    """
    if spec.kind != "trades":
        raise ValueError("trades_regularizer requires kind='trades'")
    x = batch[0] if isinstance(batch, tuple) else batch
    if delta is None:
        delta = trades_delta(model, x, spec, params, rng)
    xc = ad.constant(np.asarray(x, dtype=np.float64))
    z_clean = models.logits(model, xc, params)
    z_adv = models.logits(model, xc + delta, params)
    logp = _log_softmax(z_clean)
    p = ad.softmax(z_clean, axis=1)
    logq = _log_softmax(z_adv)
    return ad.tmean(_divergence_rows(logp, p, logq, spec.divergence))


def regularizer(model, batch, spec: RobustSpec, params=None, rng=None,
                delta=None) -> ad.Tensor:
    if spec.kind == "at":
        return at_regularizer(model, batch, spec, params, rng, delta)
    return trades_regularizer(model, batch, spec, params, rng, delta)


def robust_objective(model, labeled_batch, spec: RobustSpec, unlabeled_batch=None,
                     params=None, rng=None) -> ad.Tensor:
    """lam * clean loss + R, with optional unlabeled data joining R (trades only)."""
    x, y = labeled_batch
    if unlabeled_batch is not None and spec.kind != "trades":
        raise ValueError("unlabeled data requires the label-free trades form")
    total = None
    if spec.lam > 0:
        clean = models.cross_entropy(models.logits(model, ad.constant(x), params), y)
        total = spec.lam * clean
    if spec.kind == "trades" and unlabeled_batch is not None:
        xs = np.concatenate([np.asarray(x, dtype=np.float64),
                             np.asarray(unlabeled_batch, dtype=np.float64)], axis=0)
        reg = trades_regularizer(model, xs, spec, params, rng)
    else:
        reg = regularizer(model, labeled_batch, spec, params, rng)
    return reg if total is None else total + reg
