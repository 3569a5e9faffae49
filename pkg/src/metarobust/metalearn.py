"""Bi-level training: inner fine-tuning, the regularized meta-objective,
meta-updates with split step sizes, and meta-testing.

The meta-objective averages, over sampled tasks, the query loss of the
adapted model plus gamma_out times a robust term (plus an optional
contrastive term).  gamma_out = inf drops the clean term entirely, leaving
the robust term as the whole objective.  Gradients flow through all K inner
steps unless first_order is set.

RNG discipline: every stochastic draw (attack inits, view choices) comes
from a purpose-tagged seed stream, so runs that differ only in gamma weights
consume identical randomness and stay comparable term by term.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models
from . import contrastive as cl
from .attacks import AttackConfig
from .regularizers import RobustSpec, regularizer, trades_regularizer, at_delta

INFINITY = math.inf

# purpose tags for derived seed streams
_INNER, _OUTER, _CL, _EVAL = 0, 1, 2, 3


def _stream(base, task_index, purpose):
    return np.random.default_rng(
        np.random.SeedSequence([*base, task_index, purpose]))


@dataclass(frozen=True)
class MetaConfig:
    gamma_in: float = 0.0
    gamma_out: float = 0.0        # math.inf drops the clean meta term
    gamma_cl: float = 0.0
    K: int = 5
    alpha: float = 0.01
    beta1: float = 0.001
    beta2: float = 0.001
    finetune_scope: str = "full"  # or "head_only"
    robust: Optional[RobustSpec] = None
    tasks_per_batch: int = 4
    epochs: int = 6
    batches_per_epoch: int = 25
    seed: int = 0
    first_order: bool = False
    tau: float = 0.5
    cl_normalize: bool = True
    cl_transforms: cl.TransformConfig = field(default_factory=cl.TransformConfig)

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if self.alpha <= 0 or self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("step sizes must be positive")
        if self.finetune_scope not in ("full", "head_only"):
            raise ValueError(f"unknown finetune_scope {self.finetune_scope!r}")
        if self.gamma_in < 0 or self.gamma_cl < 0 or not (self.gamma_out >= 0):
            raise ValueError("gamma weights must be non-negative")
        if math.isinf(self.gamma_in):
            raise ValueError("gamma_in must be finite")
        needs_robust = self.gamma_in > 0 or self.gamma_out > 0
        if needs_robust and self.robust is None:
            raise ValueError("robust spec required when gamma_in or gamma_out > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.tasks_per_batch < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("batch/epoch counts out of range")


@dataclass
class FineTuneResult:
    adapted_params: ad.Tensor
    inner_losses: list


def _scope_mask(model, scope):
    if scope == "full":
        return None
    mask = np.zeros(model.n_params)
    mask[model.head_start:] = 1.0
    return ad.constant(mask)


def inner_finetune(model, support, cfg: MetaConfig, track_grad: bool = False,
                   params=None, rng=None, scope=None, gamma_in=None) -> FineTuneResult:
    """K gradient steps on the support loss (+ gamma_in * robust term).

    With scope head_only the representation block of the result is bitwise
    the starting block.  With track_grad the adapted parameters stay
    differentiable w.r.t. the given params tensor through all K steps.
    """
    xs, ys = support
    if len(ys) == 0:
        raise ValueError("support set is empty")
    scope = scope or cfg.finetune_scope
    g_in = cfg.gamma_in if gamma_in is None else gamma_in
    p = params if params is not None else ad.leaf(model.params)
    mask = _scope_mask(model, scope)
    losses = []
    for k in range(cfg.K):
        loss = models.cross_entropy(models.logits(model, xs, p), ys)
        if g_in > 0:
            loss = loss + g_in * regularizer(model, (xs, ys), cfg.robust,
                                             params=p, rng=rng)
        val = loss.item()
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite inner loss at step {k}")
        losses.append(val)
        (g,) = ad.grad(loss, [p], create_graph=track_grad)
        if mask is not None:
            g = g * mask
        if track_grad:
            p = p - cfg.alpha * g
        else:
            p = ad.leaf(p.data - cfg.alpha * g.data)
    return FineTuneResult(adapted_params=p, inner_losses=losses)


def _task_terms(model, ep, cfg: MetaConfig, p0, base, i):
    """Clean / robust / contrastive tensors for one episode."""
    r_in = _stream(base, i, _INNER)
    if cfg.first_order and cfg.K > 0:
        ft = inner_finetune(model, ep.support, cfg, track_grad=False, rng=r_in)
        adapted = p0 + ad.constant(ft.adapted_params.data - model.params)
    else:
        ft = inner_finetune(model, ep.support, cfg, track_grad=True,
                            params=p0, rng=r_in)
        adapted = ft.adapted_params
    xq, yq = ep.query
    clean = models.cross_entropy(models.logits(model, xq, adapted), yq)

    robust = None
    if cfg.gamma_out > 0:  # includes inf
        r_out = _stream(base, i, _OUTER)
        if cfg.robust.kind == "trades" and ep.unlabeled is not None:
            xr = np.concatenate([xq, ep.unlabeled], axis=0)
            robust = trades_regularizer(model, xr, cfg.robust,
                                        params=adapted, rng=r_out)
        else:
            robust = regularizer(model, (xq, yq), cfg.robust,
                                 params=adapted, rng=r_out)

    cl_term = None
    if cfg.gamma_cl > 0:
        r_cl = _stream(base, i, _CL)
        tcfg = replace(cfg.cl_transforms, seed=int(r_cl.integers(2 ** 31)))
        vb = cl.make_views(xq, tcfg, model.arch_spec.input_dims)
        positives = vb.positives
        if cfg.robust is not None and cfg.robust.attack.epsilon > 0:
            # adversarial examples join the positive-view distribution:
            # each pair draws its positive from {transform, adversarial}
            adv = cl.adversarial_views(model, (xq, yq), cfg.robust.attack,
                                       params=adapted, rng=r_cl)
            take_adv = r_cl.uniform(size=xq.shape[0]) < 0.5
            positives = np.where(take_adv[:, None], adv, positives)
        stacked = np.concatenate([vb.anchors, positives], axis=0)
        reps = models.representation(model, stacked, params=adapted)
        cl_term = cl.contrastive_loss(reps, cl.paired_indices(2 * xq.shape[0]),
                                      tau=cfg.tau, normalize=cfg.cl_normalize)
    return clean, robust, cl_term, ft


def _mean(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total * (1.0 / len(tensors))


def meta_objective(model, task_batch, cfg: MetaConfig, params=None, base_seed=None):
    """Batch objective plus a per-term breakdown.

    Returns (total, breakdown) where breakdown holds the unweighted term
    tensors ("clean_t", "robust_t", "cl_t", None when absent) and their float
    values.  With gamma_out = inf the total is the robust term alone.
    """
    if len(task_batch) == 0:
        raise ValueError("empty task batch")
    base = base_seed if base_seed is not None else (cfg.seed,)
    if isinstance(base, int):
        base = (base,)
    # a leaf, not a constant: the inner loop differentiates w.r.t. this
    p0 = params if params is not None else ad.leaf(model.params)
    cleans, robusts, cls_ = [], [], []
    for i, ep in enumerate(task_batch):
        clean, robust, cl_term, _ = _task_terms(model, ep, cfg, p0, base, i)
        cleans.append(clean)
        if robust is not None:
            robusts.append(robust)
        if cl_term is not None:
            cls_.append(cl_term)
    clean_t = _mean(cleans)
    robust_t = _mean(robusts) if robusts else None
    cl_t = _mean(cls_) if cls_ else None

    if math.isinf(cfg.gamma_out):
        total = robust_t
    else:
        total = clean_t
        if robust_t is not None:
            total = total + cfg.gamma_out * robust_t
    if cl_t is not None:
        total = total + cfg.gamma_cl * cl_t

    breakdown = {
        "clean_t": clean_t, "robust_t": robust_t, "cl_t": cl_t,
        "clean": clean_t.item(),
        "robust": robust_t.item() if robust_t is not None else 0.0,
        "cl": cl_t.item() if cl_t is not None else 0.0,
        "total": total.item(),
    }
    return total, breakdown


def meta_step(model, task_batch, cfg: MetaConfig, base_seed=None):
    """One meta-update: w := w - beta1*grad(clean) - beta2*grad(weighted rest)."""
    w = ad.leaf(model.params)
    _total, bd = meta_objective(model, task_batch, cfg, params=w,
                                base_seed=base_seed)
    new = model.params.copy()
    metrics = dict(clean=bd["clean"], robust=bd["robust"], cl=bd["cl"],
                   total=bd["total"], grad_norm_clean=0.0, grad_norm_rest=0.0)

    if not math.isinf(cfg.gamma_out):
        (g1,) = ad.grad(bd["clean_t"], [w], create_graph=False)
        if not np.all(np.isfinite(g1.data)):
            raise FloatingPointError("non-finite meta-gradient (clean term)")
        metrics["grad_norm_clean"] = float(np.linalg.norm(g1.data))
        new = new - cfg.beta1 * g1.data

    rest = None
    if bd["robust_t"] is not None:
        rest = bd["robust_t"] if math.isinf(cfg.gamma_out) \
            else cfg.gamma_out * bd["robust_t"]
    if bd["cl_t"] is not None:
        piece = cfg.gamma_cl * bd["cl_t"]
        rest = piece if rest is None else rest + piece
    if rest is not None:
        (g2,) = ad.grad(rest, [w], create_graph=False)
        if not np.all(np.isfinite(g2.data)):
            raise FloatingPointError("non-finite meta-gradient (robust term)")
        metrics["grad_norm_rest"] = float(np.linalg.norm(g2.data))
        new = new - cfg.beta2 * g2.data

    return model.with_params(new), metrics


def train(model, task_stream, cfg: MetaConfig):
    """epochs x batches meta-steps; deterministic under cfg.seed.

    task_stream is either a list of task batches (replayed every epoch) or a
    callable (epoch, batch_index) -> list of Episodes.
    """
    if callable(task_stream):
        get_batch = task_stream
        n_batches = cfg.batches_per_epoch
    else:
        batches = list(task_stream)
        if not batches:
            raise ValueError("task_stream yields no batches")
        get_batch = lambda e, b: batches[b]
        n_batches = len(batches)
    log = []
    for epoch in range(cfg.epochs):
        for b in range(n_batches):
            batch = get_batch(epoch, b)
            model, metrics = meta_step(model, batch, cfg,
                                       base_seed=(cfg.seed, epoch, b))
            metrics.update(epoch=epoch, batch=b)
            log.append(metrics)
    return model, log


@dataclass
class TestResult:
    sa: float
    sa_ci: float
    ra: float
    ra_ci: float
    n_tasks: int
    per_task_sa: np.ndarray
    per_task_ra: np.ndarray


def _ci95(values):
    if len(values) < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / np.sqrt(len(values)))


def meta_test(model, test_tasks, cfg: MetaConfig, ft_mode: str = "standard",
              scope=None, eval_attack: Optional[AttackConfig] = None,
              base_seed=None, ft_gamma=None, threads: int = 1) -> TestResult:
    """Fine-tune on each task's support set, then measure clean and attacked
    query accuracy.  At epsilon 0 the attacked pass is skipped and RA reuses
    the clean forward, so RA equals SA exactly.

    Tasks are independent; with threads > 1 they run on a thread pool and the
    per-task results land at their task index, so the reduction order (and
    every reported number) is identical to the serial run."""
    if len(test_tasks) == 0:
        raise ValueError("no test tasks")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if ft_mode not in ("standard", "adversarial"):
        raise ValueError(f"unknown ft_mode {ft_mode!r}")
    scope = scope or cfg.finetune_scope
    base = base_seed if base_seed is not None else (cfg.seed, 9999)
    if isinstance(base, int):
        base = (base,)
    eval_attack = eval_attack or AttackConfig(epsilon=2.0, steps=10)
    if ft_mode == "adversarial":
        if ft_gamma is None:
            ft_gamma = cfg.gamma_out if (cfg.gamma_out > 0 and math.isfinite(cfg.gamma_out)) else 1.0
        ft_cfg = cfg if cfg.robust is not None else replace(
            cfg, robust=RobustSpec(kind="at", gamma=ft_gamma, attack=eval_attack))
    else:
        ft_gamma = 0.0
        ft_cfg = cfg
    eval_spec = RobustSpec(kind="at", gamma=1.0, attack=eval_attack)

    sa = np.empty(len(test_tasks))
    ra = np.empty(len(test_tasks))

    def run_task(t):
        ep = test_tasks[t]
        r_in = _stream(base, t, _INNER)
        ft = inner_finetune(model, ep.support, ft_cfg, track_grad=False,
                            rng=r_in, scope=scope, gamma_in=ft_gamma)
        adapted = ft.adapted_params
        xq, yq = ep.query
        with ad.no_grad():
            clean_logits = models.logits(model, xq, ad.constant(adapted.data))
        sa_t = models.accuracy(clean_logits, yq)
        if eval_attack.epsilon == 0.0:
            return sa_t, sa_t
        r_ev = _stream(base, t, _EVAL)
        delta = at_delta(model, xq, yq, eval_spec, params=adapted, rng=r_ev)
        with ad.no_grad():
            adv_logits = models.logits(model, ad.constant(xq) + delta,
                                       ad.constant(adapted.data))
        return sa_t, models.accuracy(adv_logits, yq)

    if threads == 1:
        results = [run_task(t) for t in range(len(test_tasks))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_task, range(len(test_tasks))))
    for t, (sa_t, ra_t) in enumerate(results):
        sa[t], ra[t] = sa_t, ra_t
    return TestResult(sa=float(sa.mean()), sa_ci=_ci95(sa),
                      ra=float(ra.mean()), ra_ci=_ci95(ra),
                      n_tasks=len(test_tasks), per_task_sa=sa, per_task_ra=ra)
