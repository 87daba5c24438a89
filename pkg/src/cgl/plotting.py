"""Figures written next to the CSV reports.

Each function takes plain rows (the same dicts the CSV writers consume) and a
destination path; matplotlib runs on the Agg backend so no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BLUE = "#1f77b4"
ORANGE = "#ff7f0e"
GREEN = "#2ca02c"
GRAY = "#7f7f7f"

GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.25, alpha=0.4)


def _figure(width=5.0, height=3.4):
    fig, ax = plt.subplots(figsize=(width, height), dpi=120)
    ax.grid(True, **GRID_KWARGS)
    return fig, ax


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(rows, path):
    """Loss and holdout accuracy per epoch from ``metrics.csv`` rows."""
    epochs = [int(r["epoch"]) for r in rows]
    ce_cols = sorted(k for k in rows[0] if k.startswith("ce_"))
    kl_cols = sorted(k for k in rows[0] if k.startswith("kl_"))
    acc_cols = sorted(k for k in rows[0] if k.startswith("holdout_acc_"))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4), dpi=120)
    ce = [sum(float(r[c]) for c in ce_cols) for r in rows]
    kl = [sum(float(r[c]) for c in kl_cols) for r in rows]
    ax1.plot(epochs, ce, color=BLUE, label="cross-entropy")
    ax1.plot(epochs, kl, color=ORANGE, label="imitation KL")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("summed loss")
    ax1.set_yscale("log")
    ax1.legend(frameon=False)
    for c in acc_cols:
        ax2.plot(epochs, [float(r[c]) for r in rows], linewidth=1, label=c.replace("holdout_acc_", "student "))
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("holdout accuracy")
    ax2.legend(frameon=False, fontsize=7)
    for ax in (ax1, ax2):
        ax.grid(True, **GRID_KWARGS)
    return _save(fig, path)


def plot_perturbation(rows, path):
    """Mean accuracy drop against sigma, one line per model label."""
    fig, ax = _figure()
    labels = list(dict.fromkeys(r["model"] for r in rows))
    colors = {"cgl": BLUE, "baseline": ORANGE}
    for label in labels:
        sub = [r for r in rows if r["model"] == label]
        sig = sorted({float(r["sigma"]) for r in sub})
        drop = [np.mean([float(r["drop"]) for r in sub if float(r["sigma"]) == s]) for s in sig]
        ax.plot(sig, drop, marker="o", color=colors.get(label), label=label)
    ax.set_xlabel(r"perturbation $\sigma$")
    ax.set_ylabel("accuracy drop")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep_p(rows, path):
    fig, ax = _figure()
    p = [float(r["p"]) for r in rows]
    ax.errorbar(p, [float(r["mean_acc"]) for r in rows], yerr=[float(r["std_acc"]) for r in rows],
                color=BLUE, marker="o", capsize=2)
    ax.set_xlabel("imitation probability p")
    ax.set_ylabel("test accuracy", color=BLUE)
    ax2 = ax.twinx()
    ax2.plot(p, [float(r["mean_diversity"]) for r in rows], color=ORANGE, marker="s")
    ax2.set_ylabel("diversity", color=ORANGE)
    return _save(fig, path)


def plot_sharing(rows, path):
    fig, ax = _figure()
    ratio = [float(r["sharing_ratio"]) for r in rows]
    acc = [float(r["mean_acc"]) for r in rows]
    order = np.argsort(ratio, kind="stable")
    ax.plot(np.array(ratio)[order], np.array(acc)[order], color=GRAY, linewidth=0.8)
    for i in order:
        ax.errorbar(ratio[i], acc[i], yerr=float(rows[i]["std_acc"]), marker="o", color=BLUE, capsize=2)
        ax.annotate(rows[i]["setting"], (ratio[i], acc[i]), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("mean sharing ratio")
    ax.set_ylabel("test accuracy")
    return _save(fig, path)


def plot_diversity(matrix, path, title=None):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4, 3.4), dpi=120)
    im = ax.imshow(matrix, cmap="viridis", vmin=0)
    fig.colorbar(im, ax=ax, label="mean L2 distance")
    ax.set_xlabel("student")
    ax.set_ylabel("student")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_paired(rows, path, a="with_subsets", b="without_subsets", ylabel="diversity"):
    fig, ax = _figure()
    seeds = [str(r["seed"]) for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [float(r[a]) for r in rows], width=0.4, color=BLUE, label=a.replace("_", " "))
    ax.bar(x + 0.2, [float(r[b]) for r in rows], width=0.4, color=ORANGE, label=b.replace("_", " "))
    ax.set_xticks(x, seeds)
    ax.set_xlabel("seed")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_transfer(rows, path):
    fig, ax = _figure(4.2, 3.6)
    ra = [int(r["rank_a"]) for r in rows]
    rb = [int(r["rank_b"]) for r in rows]
    ax.scatter(ra, rb, color=BLUE)
    for r in rows:
        ax.annotate(str(r["structure"]), (int(r["rank_a"]), int(r["rank_b"])), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    n = max(ra + rb)
    ax.plot([1, n], [1, n], color=GRAY, linewidth=0.8)
    ax.set_xlabel("rank on task A")
    ax.set_ylabel("rank on task B")
    return _save(fig, path)


def plot_ablation(rows, path):
    fig, ax = _figure()
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    means = [np.mean([float(r["test_acc"]) for r in rows if r["variant"] == v]) for v in variants]
    stds = [np.std([float(r["test_acc"]) for r in rows if r["variant"] == v]) for v in variants]
    ax.bar(variants, means, yerr=stds, color=BLUE, capsize=3)
    lo = min(m - s for m, s in zip(means, stds))
    ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(means) + 0.05))
    ax.set_ylabel("best-student test accuracy")
    return _save(fig, path)
