"""Figure rendering for sweep reports, training logs, and inversion results.

Kept separate from the measurement code on purpose: evaluation emits CSV,
the command-line report path calls into here to render figures next to it.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_ra_curve(report, path, label=None):
    """Accuracy vs attack strength with 95% CI bars."""
    eps = [r[0] for r in report.per_epsilon]
    acc = [r[1] for r in report.per_epsilon]
    ci = [r[2] for r in report.per_epsilon]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(eps, acc, yerr=ci, marker="o", capsize=3, label=label)
    ax.set_xlabel("attack budget (intensity levels)")
    ax.set_ylabel("query accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(log, path):
    """Loss terms over meta-batches from the training log dicts."""
    if not log:
        raise ValueError("empty training log")
    steps = np.arange(len(log))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "clean", "robust", "cl"):
        vals = [rec.get(key) for rec in log]
        if any(v is not None and v != 0.0 for v in vals):
            ax.plot(steps, [0.0 if v is None else v for v in vals], label=key)
    ax.set_xlabel("meta-batch")
    ax.set_ylabel("objective terms")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_iam(result, image_dims, path):
    """Seed image, inverted image, and the activation trace side by side."""
    h, w, c = image_dims
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, img, title in ((axes[0], result.seed_image, "seed"),
                           (axes[1], result.inverted_image, "inverted")):
        ax.imshow(img.reshape(h, w, c)[:, :, 0], cmap="gray", vmin=0, vmax=255)
        ax.set_title(title)
        ax.axis("off")
    axes[2].plot(result.objective_trace)
    axes[2].set_title(f"neuron {result.neuron_index} activation")
    axes[2].set_xlabel("step")
    axes[2].grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
