"""Experiment measurement: accuracy-vs-epsilon sweeps, neuron-activation
inversion, and delimited report files.

This module emits CSV plus a structured sidecar only; figure rendering lives
in the plotting module and is wired up by the command-line layer.
"""

import json
import time
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import AttackConfig
from .metalearn import MetaConfig, meta_test


@dataclass
class EvalReport:
    per_epsilon: list          # rows (epsilon, accuracy, ci, n_tasks)
    config_echo: dict
    wall_time: float


@dataclass
class IAMResult:
    seed_image: np.ndarray
    inverted_image: np.ndarray
    neuron_index: int
    objective_trace: list


def _config_echo(cfg: MetaConfig, attack_steps, epsilons, ft_mode, scope):
    echo = {
        "gamma_in": cfg.gamma_in, "gamma_out": cfg.gamma_out,
        "gamma_cl": cfg.gamma_cl, "K": cfg.K, "alpha": cfg.alpha,
        "beta1": cfg.beta1, "beta2": cfg.beta2,
        "finetune_scope": cfg.finetune_scope, "seed": cfg.seed,
        "eval_attack_steps": attack_steps, "epsilons": list(epsilons),
        "ft_mode": ft_mode, "scope": scope,
    }
    if cfg.robust is not None:
        echo["robust"] = {"kind": cfg.robust.kind, "gamma": cfg.robust.gamma,
                          "epsilon": cfg.robust.attack.epsilon,
                          "attack_kind": cfg.robust.attack.kind,
                          "steps": cfg.robust.attack.steps}
    return echo


def ra_sweep(model, test_tasks, epsilons, attack_steps: int = 10,
             ft_mode: str = "standard", scope=None, cfg: Optional[MetaConfig] = None,
             base_seed=None, threads: int = 1) -> EvalReport:
    """Accuracy under a PGD eval attack at each epsilon; epsilon 0 row is the
    clean accuracy by construction (the attacked pass is skipped there)."""
    eps = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be sorted ascending")
    if any(e < 0 for e in eps):
        raise ValueError("epsilons must be non-negative")
    cfg = cfg or MetaConfig()
    scope = scope or cfg.finetune_scope
    t0 = time.perf_counter()
    rows = []
    for e in eps:
        attack = AttackConfig(epsilon=e, steps=attack_steps, random_init=True)
        res = meta_test(model, test_tasks, cfg, ft_mode=ft_mode, scope=scope,
                        eval_attack=attack, base_seed=base_seed, threads=threads)
        rows.append((e, res.ra, res.ra_ci, res.n_tasks))
    return EvalReport(per_epsilon=rows,
                      config_echo=_config_echo(cfg, attack_steps, eps, ft_mode, scope),
                      wall_time=time.perf_counter() - t0)


def invert_neuron(model, seed_image, neuron_index: int, steps: int = 200,
                  step_size: float = 50.0, accept_only_improving: bool = True,
                  params=None) -> IAMResult:
    """Gradient ascent on one embedding coordinate over the pixel box.

    With accept_only_improving (default) a step is kept only when it raises
    the activation, so the trace is non-decreasing; the plain fixed-step
    variant records whatever each step produces.
    """
    embed = model.arch_spec.embed_dim
    if not (0 <= neuron_index < embed):
        raise ValueError(f"neuron index {neuron_index} outside [0, {embed})")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x = np.asarray(seed_image, dtype=np.float64).reshape(-1).copy()
    if x.shape[0] != model.arch_spec.input_size:
        raise ValueError("seed image does not match model input size")

    def activation_and_grad(xv):
        xt = ad.leaf(xv[None, :])
        rep = models.representation(model, xt, params)
        val = ad.tsum(ad.take_per_row(rep, np.array([neuron_index])))
        (g,) = ad.grad(val, [xt])
        return val.item(), g.data[0]

    def activation(xv):
        with ad.no_grad():
            rep = models.representation(model, ad.constant(xv[None, :]), params)
        return float(rep.data[0, neuron_index])

    current = activation(x)
    trace = [current]
    for _ in range(steps):
        _, g = activation_and_grad(x)
        candidate = np.clip(x + step_size * g, 0.0, 255.0)
        cand_val = activation(candidate)
        if accept_only_improving:
            if cand_val > current:
                x, current = candidate, cand_val
        else:
            x, current = candidate, cand_val
        trace.append(current)
    return IAMResult(seed_image=np.asarray(seed_image, dtype=np.float64).reshape(-1),
                     inverted_image=x, neuron_index=neuron_index,
                     objective_trace=trace)


# ---------------------------------------------------------------------------
# Report files: CSV with a fixed header plus a JSON sidecar (config echo and
# wall time) at <path>.config.json.  Floats are written with repr precision
# so a load round-trips every number exactly.
# ---------------------------------------------------------------------------

CSV_HEADER = "epsilon,accuracy,ci,n_tasks"


def emit_report(report: EvalReport, path) -> None:
    lines = [CSV_HEADER]
    for e, acc, ci, n in report.per_epsilon:
        lines.append(f"{float(e)!r},{float(acc)!r},{float(ci)!r},{int(n)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(f"{path}.config.json", "w") as f:
        json.dump({"config_echo": report.config_echo,
                   "wall_time": report.wall_time}, f, indent=2, sort_keys=True)
        f.write("\n")


def load_report(path) -> EvalReport:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected report header in {path}")
    rows = []
    for ln in lines[1:]:
        e, acc, ci, n = ln.split(",")
        rows.append((float(e), float(acc), float(ci), int(n)))
    try:
        with open(f"{path}.config.json") as f:
            side = json.load(f)
    except FileNotFoundError:
        side = {"config_echo": {}, "wall_time": 0.0}
    return EvalReport(per_epsilon=rows, config_echo=side["config_echo"],
                      wall_time=side["wall_time"])


def write_iam(result: IAMResult, path_stem, image_dims) -> dict:
    """Portable dumps: 8-bit single-image dataset file, a grayscale text grid,
    and the objective trace as CSV.  Returns the written paths."""
    from . import tasks  # local import: avoid cycle at module load

    h, w, c = image_dims
    img = result.inverted_image.reshape(h, w, c)
    src = tasks.DatasetSource(kind="file", data=np.round(img)[None, None],
                              image_dims=(h, w, c), class_ids=(0,))
    paths = {
        "image": f"{path_stem}.mrds",
        "text": f"{path_stem}.txt",
        "trace": f"{path_stem}_trace.csv",
    }
    tasks.write_file_dataset(src, paths["image"])
    with open(paths["text"], "w") as f:
        f.write(f"# neuron {result.neuron_index}, {h}x{w}x{c}\n")
        for row in np.round(img[:, :, 0]).astype(int):
            f.write(" ".join(f"{v:3d}" for v in row) + "\n")
    with open(paths["trace"], "w") as f:
        f.write("step,activation\n")
        for i, v in enumerate(result.objective_trace):
            f.write(f"{i},{float(v)!r}\n")
    return paths
