"""Batch-experiment driver.

Subcommands: train, eval, invert, convert-dataset.  Every run writes a
config echo from which the run can be reproduced exactly.  Exit codes:
0 success, 2 configuration error, 3 runtime numeric failure.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import evaluation, models, plotting, tasks
from .config import ConfigError
from .metalearn import train

LOG_HEADER = "epoch,batch,total,clean,robust,cl,grad_norm_clean,grad_norm_rest"


def _write_log(log, path):
    lines = [LOG_HEADER]
    for rec in log:
        lines.append(",".join([str(rec["epoch"]), str(rec["batch"])] +
                              [repr(float(rec[k])) for k in
                               ("total", "clean", "robust", "cl",
                                "grad_norm_clean", "grad_norm_rest")]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _common_overrides(args):
    ov = {}
    if getattr(args, "preset", None):
        ov["preset"] = args.preset
    if getattr(args, "out", None):
        ov["out_dir"] = args.out
    return ov


def cmd_train(args) -> int:
    ov = _common_overrides(args)
    if args.seed is not None:
        ov["meta.seed"] = args.seed
    cfg = cfgmod.load_config(args.config, ov)
    os.makedirs(cfg.out_dir, exist_ok=True)

    train_src, _ = cfgmod.build_dataset(cfg)
    model = cfgmod.build_model(cfg)
    stream = cfgmod.episode_stream(cfg, train_src)
    print(f"training: {model!r}, {cfg.meta.epochs} epochs x "
          f"{cfg.meta.batches_per_epoch} batches")
    t0 = time.perf_counter()
    trained, log = train(model, stream, cfg.meta)
    wall = time.perf_counter() - t0

    ck = os.path.join(cfg.out_dir, "checkpoint.mmck")
    models.save_model(trained, ck)
    _write_log(log, os.path.join(cfg.out_dir, "train_log.csv"))
    cfgmod.write_echo(cfg, os.path.join(cfg.out_dir, "config_echo.json"))
    plotting.plot_training_curves(log, os.path.join(cfg.out_dir, "training_curves.png"))
    print(f"done in {wall:.1f}s; final total {log[-1]['total']:.4f}; "
          f"checkpoint {ck}")
    return 0


def cmd_eval(args) -> int:
    ov = _common_overrides(args)
    if args.seed is not None:
        ov["eval.seed"] = args.seed
    if args.eps is not None:
        try:
            budgets = [float(v) for v in args.eps.split(",") if v]
        except ValueError:
            raise ConfigError(f"--eps must be comma-separated numbers, got {args.eps!r}")
        if not budgets:
            raise ConfigError("--eps must name at least one budget")
        ov["eval.epsilons"] = budgets
    if args.ft_mode is not None:
        ov["eval.ft_mode"] = args.ft_mode
    if args.scope is not None:
        ov["eval.scope"] = args.scope
    cfg = cfgmod.load_config(args.config, ov)
    os.makedirs(cfg.out_dir, exist_ok=True)

    model = models.load_model(args.checkpoint)
    _, test_src = cfgmod.build_dataset(cfg)
    if tuple(model.arch_spec.input_dims) != tuple(test_src.image_dims):
        raise ConfigError(
            f"checkpoint input dims {model.arch_spec.input_dims} do not match "
            f"dataset dims {test_src.image_dims}")
    if model.arch_spec.n_classes != cfg.episodes["way"]:
        raise ConfigError(
            f"checkpoint head has {model.arch_spec.n_classes} classes but "
            f"episodes.way is {cfg.episodes['way']}")

    eps = cfgmod.eval_episodes(cfg, test_src)
    report = evaluation.ra_sweep(
        model, eps, cfg.eval["epsilons"], attack_steps=cfg.eval["attack_steps"],
        ft_mode=cfg.eval["ft_mode"], scope=cfg.eval["scope"],
        cfg=cfgmod.eval_meta(cfg),
        base_seed=(cfg.eval["seed"],), threads=args.threads)
    csv_path = os.path.join(cfg.out_dir, "report.csv")
    evaluation.emit_report(report, csv_path)
    plotting.plot_ra_curve(report, os.path.join(cfg.out_dir, "ra_curve.png"))
    cfgmod.write_echo(cfg, os.path.join(cfg.out_dir, "config_echo.json"))
    for e, acc, ci, n in report.per_epsilon:
        print(f"eps={e:g}: accuracy {acc:.4f} +- {ci:.4f} over {n} tasks")
    print(f"report {csv_path} ({report.wall_time:.1f}s)")
    return 0


def cmd_invert(args) -> int:
    cfg = cfgmod.load_config(args.config, _common_overrides(args)) \
        if args.config else None
    out_dir = args.out or (cfg.out_dir if cfg else "runs/iam")
    os.makedirs(out_dir, exist_ok=True)
    model = models.load_model(args.checkpoint)
    h, w, c = model.arch_spec.input_dims

    if args.image:
        src = tasks.load_file_dataset(args.image)
        if src.image_dims != (h, w, c):
            raise ConfigError(f"image dims {src.image_dims} do not match "
                              f"model input {(h, w, c)}")
        seed_img = src.data.reshape(-1, h * w * c)[0]
    else:
        rng = np.random.default_rng(args.seed or 0)
        seed_img = rng.uniform(96.0, 160.0, size=h * w * c)

    res = evaluation.invert_neuron(model, seed_img, args.neuron,
                                   steps=args.steps, step_size=args.step_size,
                                   accept_only_improving=not args.plain_steps)
    stem = os.path.join(out_dir, f"iam_neuron{args.neuron}")
    paths = evaluation.write_iam(res, stem, (h, w, c))
    plotting.plot_iam(res, (h, w, c), stem + ".png")
    print(f"neuron {args.neuron}: activation {res.objective_trace[0]:.4f} -> "
          f"{res.objective_trace[-1]:.4f}; wrote {paths['image']}")
    return 0


def cmd_convert(args) -> int:
    if args.config:
        cfg = cfgmod.load_config(args.config)
        d = cfg.dataset
        if d["kind"] != "synthetic":
            raise ConfigError("convert-dataset with a config needs dataset.kind"
                              " 'synthetic'")
        src = tasks.synth_dataset(classes=d["classes"],
                                  samples_per_class=d["samples_per_class"],
                                  dims=tuple(d["dims"]),
                                  noise_level=d["noise_level"], seed=d["seed"])
    elif args.synthetic:
        try:
            classes, spc, h, w, c = (int(v) for v in args.synthetic.split(","))
        except ValueError:
            raise ConfigError("--synthetic expects classes,samples,h,w,c")
        src = tasks.synth_dataset(classes=classes, samples_per_class=spc,
                                  dims=(h, w, c), noise_level=args.noise,
                                  seed=args.seed or 0)
    elif args.from_npy:
        arr = np.load(args.from_npy)
        if arr.ndim != 5:
            raise ConfigError(f"expected a [classes, samples, h, w, c] array, "
                              f"got shape {arr.shape}")
        arr = np.clip(np.round(arr.astype(np.float64)), 0, 255)
        src = tasks.DatasetSource(kind="file", data=arr,
                                  image_dims=arr.shape[2:],
                                  class_ids=tuple(range(arr.shape[0])))
    else:
        raise ConfigError("convert-dataset needs one of --config, --synthetic,"
                          " --from-npy")
    tasks.write_file_dataset(src, args.output)
    print(f"wrote {src.classes} classes x {src.samples_per_class} samples to "
          f"{args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metarobust",
        description="Robust meta-learning experiments: train, evaluate under "
                    "attack sweeps, invert neurons, convert datasets.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train from a config file")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    t.add_argument("--seed", type=int, help="overrides meta.seed in the file")
    t.add_argument("--out", help="overrides out_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy sweep over attack budgets")
    e.add_argument("checkpoint")
    e.add_argument("-c", "--config", required=True)
    e.add_argument("--eps", help="comma-separated budgets, e.g. 0,2,4,6,8,10")
    e.add_argument("--ft-mode", choices=["standard", "adversarial"])
    e.add_argument("--scope", choices=["full", "head_only"])
    e.add_argument("--seed", type=int, help="overrides eval.seed")
    e.add_argument("--threads", type=int, default=1,
                   help="worker cap for per-task evaluation")
    e.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    e.add_argument("--out", help="overrides out_dir")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("invert", help="maximize one embedding coordinate")
    i.add_argument("checkpoint")
    i.add_argument("--neuron", type=int, required=True)
    i.add_argument("--image", help="seed image dataset file (first image used)")
    i.add_argument("--seed", type=int, help="seed for the random start image")
    i.add_argument("--steps", type=int, default=200)
    i.add_argument("--step-size", type=float, default=50.0)
    i.add_argument("--plain-steps", action="store_true",
                   help="fixed steps instead of accept-if-improved")
    i.add_argument("-c", "--config")
    i.add_argument("--out")
    i.set_defaults(func=cmd_invert, preset=None)

    cv = sub.add_parser("convert-dataset", help="write a dataset file")
    cv.add_argument("output")
    cv.add_argument("-c", "--config")
    cv.add_argument("--synthetic", help="classes,samples,h,w,c")
    cv.add_argument("--noise", type=float, default=24.0)
    cv.add_argument("--seed", type=int)
    cv.add_argument("--from-npy")
    cv.set_defaults(func=cmd_convert, preset=None, out=None)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
