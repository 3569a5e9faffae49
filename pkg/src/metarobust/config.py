"""Experiment configuration: one JSON file, preset expansion, strict keys.

Every field is validated before any compute starts; unknown keys anywhere in
the tree are rejected with their dotted path.  Attack budgets are written in
intensity levels (the 1/255 pixel-unit convention); data lives on [0, 255],
so a budget of 2 means 2 intensity levels and no further scaling happens.
"""

import json
import math
from dataclasses import dataclass, field, replace

from . import models, tasks
from .attacks import AttackConfig
from .metalearn import MetaConfig
from .regularizers import RobustSpec, INFINITY


class ConfigError(ValueError):
    pass


# Preset -> (gamma_in, gamma_out, gamma_cl, regularizer kind, attack kind,
# fine-tune scope).  Weights follow the published settings: 0.2 for the
# adversarial-loss regularizer, 5 for the divergence one, 0.1 contrastive.
PRESETS = {
    "maml":             dict(),
    "rmaml_both":       dict(gamma_in=0.2, gamma_out=0.2, robust=("at", "pgd")),
    "rmaml_out":        dict(gamma_out=0.2, robust=("at", "pgd")),
    "rmaml_out_fgsm":   dict(gamma_out=0.2, robust=("at", "fgsm")),
    "rmaml_out_anil":   dict(gamma_out=0.2, robust=("at", "pgd"),
                             finetune_scope="head_only"),
    "aq":               dict(gamma_out=INFINITY, robust=("at", "pgd")),
    "rmaml_out_trades": dict(gamma_out=5.0, robust=("trades", "pgd")),
    "rmaml_out_cl":     dict(gamma_out=0.2, gamma_cl=0.1, robust=("at", "pgd")),
}

_META_KEYS = {"gamma_in", "gamma_out", "gamma_cl", "K", "alpha", "beta1",
              "beta2", "finetune_scope", "tasks_per_batch", "epochs",
              "batches_per_epoch", "seed", "first_order", "tau",
              "cl_normalize"}
_ROBUST_KEYS = {"kind", "gamma", "divergence", "attack"}
_ATTACK_KEYS = {"epsilon", "steps", "step_size", "random_init", "kind",
                "raw_grad"}
_DATASET_KEYS = {"kind", "classes", "samples_per_class", "dims",
                 "noise_level", "seed", "train_classes", "path"}
_EPISODE_KEYS = {"way", "shot", "query_per_class"}
_EVAL_KEYS = {"epsilons", "n_tasks", "attack_steps", "ft_mode", "scope",
              "seed", "ft_steps", "ft_alpha"}
_MODEL_KEYS = {"hidden", "embed_dim", "activation", "input_scale",
               "init_seed"}
_TOP_KEYS = {"preset", "meta", "robust", "dataset", "episodes", "eval",
             "model", "out_dir"}


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    for k in section:
        if k not in allowed:
            dotted = f"{where}.{k}" if where else k
            raise ConfigError(f"unknown config key '{dotted}'")


def _num(raw, where):
    if isinstance(raw, str) and raw.lower() in ("inf", "infinity"):
        return INFINITY
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"{where} must be a number")
    return float(raw)


@dataclass
class ExperimentConfig:
    meta: MetaConfig
    dataset: dict
    episodes: dict
    eval: dict
    model: dict
    out_dir: str
    resolved: dict = field(repr=False, default_factory=dict)


def _expand_preset(raw: dict) -> dict:
    """Fold preset defaults under the explicit file values."""
    name = raw.get("preset")
    meta = dict(raw.get("meta") or {})
    robust = dict(raw.get("robust") or {})
    if name is None:
        return meta, robust
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from "
                          f"{', '.join(sorted(PRESETS))})")
    p = PRESETS[name]
    for k in ("gamma_in", "gamma_out", "gamma_cl", "finetune_scope"):
        if k in p and k not in meta:
            meta[k] = p[k]
    if "robust" in p:
        kind, atk = p["robust"]
        robust.setdefault("kind", kind)
        attack = dict(robust.get("attack") or {})
        attack.setdefault("kind", atk)
        robust["attack"] = attack
    return meta, robust


def _apply_overrides(raw: dict, overrides):
    """Dotted-path overrides (command-line flags beat file values)."""
    for path, value in (overrides or {}).items():
        node = raw
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value


def parse_config(raw: dict, overrides=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = json.loads(json.dumps(raw))  # deep copy, JSON-clean
    _apply_overrides(raw, overrides)
    _check_keys(raw, _TOP_KEYS, "")

    meta_raw, robust_raw = _expand_preset(raw)
    _check_keys(meta_raw, _META_KEYS, "meta")
    if "gamma_out" in meta_raw:
        meta_raw["gamma_out"] = _num(meta_raw["gamma_out"], "meta.gamma_out")

    # Attack settings: same spec drives inner and outer regularization.
    robust_spec = None
    need_robust = meta_raw.get("gamma_in", 0) > 0 or meta_raw.get("gamma_out", 0) > 0
    if robust_raw or need_robust:
        _check_keys(robust_raw, _ROBUST_KEYS, "robust")
        attack_raw = dict(robust_raw.get("attack") or {})
        _check_keys(attack_raw, _ATTACK_KEYS, "robust.attack")
        attack_raw.setdefault("epsilon", 2.0)
        attack_raw.setdefault("steps",
                              1 if attack_raw.get("kind") == "fgsm" else 10)
        try:
            attack = AttackConfig(**attack_raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"robust.attack: {e}") from e
        g_out = meta_raw.get("gamma_out", 0.0)
        gamma = robust_raw.get("gamma",
                               g_out if (g_out > 0 and math.isfinite(g_out)) else 1.0)
        try:
            robust_spec = RobustSpec(kind=robust_raw.get("kind", "at"),
                                     gamma=float(gamma), attack=attack,
                                     divergence=robust_raw.get("divergence", "kl"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"robust: {e}") from e

    try:
        meta = MetaConfig(robust=robust_spec, **meta_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"meta: {e}") from e

    dataset = dict(raw.get("dataset") or {})
    _check_keys(dataset, _DATASET_KEYS, "dataset")
    kind = dataset.setdefault("kind", "synthetic")
    if kind == "synthetic":
        dataset.setdefault("classes", 28)
        dataset.setdefault("samples_per_class", 60)
        dataset.setdefault("dims", [16, 16, 1])
        dataset.setdefault("noise_level", 24.0)
        dataset.setdefault("seed", 0)
        dataset.setdefault("train_classes", 20)
        if len(dataset["dims"]) != 3:
            raise ConfigError("dataset.dims must be [h, w, c]")
        if dataset["classes"] <= dataset["train_classes"]:
            raise ConfigError("dataset.classes must exceed dataset.train_classes")
    elif kind == "file":
        if "path" not in dataset:
            raise ConfigError("dataset.path is required when dataset.kind is 'file'")
        if "train_classes" not in dataset:
            raise ConfigError("dataset.train_classes is required when dataset.kind is 'file'")
    else:
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'file', got {kind!r}")

    episodes = dict(raw.get("episodes") or {})
    _check_keys(episodes, _EPISODE_KEYS, "episodes")
    episodes.setdefault("way", 5)
    episodes.setdefault("shot", 1)
    episodes.setdefault("query_per_class", 15)
    for k in _EPISODE_KEYS:
        if not isinstance(episodes[k], int) or episodes[k] <= 0:
            raise ConfigError(f"episodes.{k} must be a positive integer")

    ev = dict(raw.get("eval") or {})
    _check_keys(ev, _EVAL_KEYS, "eval")
    ev.setdefault("epsilons", [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    ev.setdefault("n_tasks", 200)
    ev.setdefault("attack_steps", 10)
    ev.setdefault("ft_mode", "standard")
    ev.setdefault("scope", None)
    ev.setdefault("seed", 1234)
    # fine-tune schedule at test time; None inherits the training K / alpha
    ev.setdefault("ft_steps", None)
    ev.setdefault("ft_alpha", None)
    ev["epsilons"] = [_num(e, "eval.epsilons") for e in ev["epsilons"]]
    if sorted(ev["epsilons"]) != ev["epsilons"] or any(e < 0 for e in ev["epsilons"]):
        raise ConfigError("eval.epsilons must be ascending and non-negative")
    if ev["ft_mode"] not in ("standard", "adversarial"):
        raise ConfigError(f"eval.ft_mode must be standard or adversarial, got {ev['ft_mode']!r}")
    if ev["scope"] not in (None, "full", "head_only"):
        raise ConfigError(f"eval.scope must be full or head_only, got {ev['scope']!r}")
    if not isinstance(ev["n_tasks"], int) or ev["n_tasks"] <= 0:
        raise ConfigError("eval.n_tasks must be a positive integer")
    if ev["ft_steps"] is not None and (not isinstance(ev["ft_steps"], int)
                                       or ev["ft_steps"] < 0):
        raise ConfigError("eval.ft_steps must be a non-negative integer")
    if ev["ft_alpha"] is not None:
        ev["ft_alpha"] = _num(ev["ft_alpha"], "eval.ft_alpha")
        if not ev["ft_alpha"] > 0:
            raise ConfigError("eval.ft_alpha must be positive")

    model = dict(raw.get("model") or {})
    _check_keys(model, _MODEL_KEYS, "model")
    model.setdefault("hidden", [32])
    model.setdefault("embed_dim", 24)
    model.setdefault("activation", "tanh")
    model.setdefault("input_scale", 1.0 / 255.0)
    model.setdefault("init_seed", meta.seed)

    out_dir = raw.get("out_dir", "runs/exp")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a non-empty string")

    resolved = {
        "meta": {k: getattr(meta, k) for k in sorted(_META_KEYS)},
        "dataset": dataset, "episodes": episodes, "eval": ev,
        "model": model, "out_dir": out_dir,
    }
    if robust_spec is not None:
        resolved["robust"] = {
            "kind": robust_spec.kind, "gamma": robust_spec.gamma,
            "divergence": robust_spec.divergence,
            "attack": {"epsilon": robust_spec.attack.epsilon,
                       "steps": robust_spec.attack.steps,
                       "step_size": robust_spec.attack.step_size,
                       "random_init": robust_spec.attack.random_init,
                       "kind": robust_spec.attack.kind,
                       "raw_grad": robust_spec.attack.raw_grad},
        }
    return ExperimentConfig(meta=meta, dataset=dataset, episodes=episodes,
                            eval=ev, model=model, out_dir=out_dir,
                            resolved=resolved)


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return parse_config(raw, overrides)


def write_echo(cfg: ExperimentConfig, path) -> None:
    """The resolved settings; re-running from this file reproduces the run."""
    with open(path, "w") as f:
        json.dump(cfg.resolved, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Builders shared by the command-line driver and tests.
# ---------------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig):
    d = cfg.dataset
    if d["kind"] == "synthetic":
        src = tasks.synth_dataset(classes=d["classes"],
                                  samples_per_class=d["samples_per_class"],
                                  dims=tuple(d["dims"]),
                                  noise_level=d["noise_level"], seed=d["seed"])
    else:
        src = tasks.load_file_dataset(d["path"])
    return tasks.class_split(src, d["train_classes"])


def build_model(cfg: ExperimentConfig):
    h, w, c = (cfg.dataset["dims"] if cfg.dataset["kind"] == "synthetic"
               else _file_dims(cfg))
    spec = models.ArchSpec(input_dims=(h, w, c),
                           hidden=tuple(cfg.model["hidden"]),
                           n_classes=cfg.episodes["way"],
                           embed_dim=cfg.model["embed_dim"],
                           activation=cfg.model["activation"],
                           input_scale=cfg.model["input_scale"])
    return models.init_model(spec, seed=cfg.model["init_seed"])


def _file_dims(cfg):
    src = tasks.load_file_dataset(cfg.dataset["path"])
    return src.image_dims


def episode_stream(cfg: ExperimentConfig, train_src):
    """Deterministic (epoch, batch) -> task batch sampler for train()."""
    ep = cfg.episodes
    with_unlabeled = (cfg.meta.robust is not None
                      and cfg.meta.robust.kind == "trades")

    def get_batch(epoch, b):
        return [tasks.sample_episode(train_src, way=ep["way"], shot=ep["shot"],
                                     query_per_class=ep["query_per_class"],
                                     with_unlabeled=with_unlabeled,
                                     seed=(cfg.meta.seed, epoch, b, t))
                for t in range(cfg.meta.tasks_per_batch)]

    return get_batch


def eval_episodes(cfg: ExperimentConfig, test_src):
    ep = cfg.episodes
    return [tasks.sample_episode(test_src, way=ep["way"], shot=ep["shot"],
                                 query_per_class=ep["query_per_class"],
                                 seed=(cfg.eval["seed"], t))
            for t in range(cfg.eval["n_tasks"])]


def eval_meta(cfg: ExperimentConfig) -> MetaConfig:
    """Meta settings in force at test time: the training config with the
    eval fine-tune schedule (ft_steps, ft_alpha) applied when set."""
    meta = cfg.meta
    if cfg.eval["ft_steps"] is not None:
        meta = replace(meta, K=cfg.eval["ft_steps"])
    if cfg.eval["ft_alpha"] is not None:
        meta = replace(meta, alpha=cfg.eval["ft_alpha"])
    return meta
