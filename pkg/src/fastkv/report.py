"""Figure rendering for the CLI report path.

Each command that writes a CSV/JSON report can also render the matching
matplotlib figure next to it. Rendering is headless (Agg) and optional.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.linestyle": ":",
    "grid.alpha": 0.6,
})

_POLICY_COLORS = {
    "gate": "tab:red",
    "oracle": "tab:blue",
    "random": "tab:gray",
    "recency": "tab:green",
}


def plot_eval_sweep(rows, path):
    """Deviation and top-1 agreement vs cache ratio, one line per policy.

    rows: dicts with policy, ratio, logit_deviation, top1_agreement.
    """
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 2.8))
    policies = sorted({r["policy"] for r in rows})
    for pol in policies:
        pts = sorted((r["ratio"], r["logit_deviation"], r["top1_agreement"])
                     for r in rows if r["policy"] == pol)
        ratios = [p[0] for p in pts]
        color = _POLICY_COLORS.get(pol)
        axes[0].plot(ratios, [p[1] for p in pts], "o-", label=pol, color=color)
        axes[1].plot(ratios, [p[2] for p in pts], "o-", label=pol, color=color)
    axes[0].set_xlabel("KV cache ratio")
    axes[0].set_ylabel("mean logit L2 deviation")
    axes[1].set_xlabel("KV cache ratio")
    axes[1].set_ylabel("top-1 agreement")
    axes[1].set_ylim(-0.02, 1.02)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_retention_heatmap(rates, path):
    """Layer x head retention-rate heatmap, viridis, fixed [0,1] scale."""
    rates = np.asarray(rates)
    fig, ax = plt.subplots(figsize=(0.6 + 0.5 * rates.shape[0],
                                    1.2 + 0.4 * rates.shape[1]))
    im = ax.imshow(rates.T, cmap="viridis", vmin=0.0, vmax=1.0,
                   aspect="auto", origin="lower")
    ax.set_xlabel("layer")
    ax.set_ylabel("head")
    ax.set_xticks(range(rates.shape[0]))
    ax.set_yticks(range(rates.shape[1]))
    ax.grid(False)
    fig.colorbar(im, ax=ax, label="retention rate")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(reports, path):
    """Train/validation BCE trajectories, one pair of lines per layer."""
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 2.8), sharey=True)
    cmap = plt.get_cmap("viridis")
    n = max(len(reports), 2)
    for i, rep in enumerate(reports):
        color = cmap(i / (n - 1))
        axes[0].plot(rep.steps, rep.train_loss, color=color,
                     label=f"layer {rep.layer}")
        if rep.val_loss:
            axes[1].plot(rep.steps, rep.val_loss, color=color)
    axes[0].set_title("training loss")
    axes[1].set_title("validation loss")
    for ax in axes:
        ax.set_xlabel("update step")
    axes[0].set_ylabel("BCE")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_score_calibration(curves, path):
    """Mean gate score vs mean oracle target per layer.

    curves: list of (layer, mean_gate, mean_target) tuples.
    """
    fig, ax = plt.subplots(figsize=(4.0, 2.8))
    layers = [c[0] for c in curves]
    ax.plot(layers, [c[1] for c in curves], "o-", label="gate score")
    ax.plot(layers, [c[2] for c in curves], "s--", label="oracle target")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_bench(results, path):
    """Prefill time and peak cache entries across sequence lengths."""
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 2.8))
    lengths = [r["length"] for r in results]
    axes[0].plot(lengths, [r["prefill_s_gated"] for r in results], "o-",
                 label="gated")
    axes[0].plot(lengths, [r["prefill_s_plain"] for r in results], "s--",
                 label="plain")
    axes[0].set_xlabel("sequence length")
    axes[0].set_ylabel("prefill time (s)")
    axes[0].legend(fontsize=7)
    axes[1].plot(lengths, [max(r["peak_entries"]) for r in results], "o-")
    axes[1].set_xlabel("sequence length")
    axes[1].set_ylabel("peak entries per layer")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
