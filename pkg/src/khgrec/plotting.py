"""Figures written next to the CSV/JSON outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_curves(curves, path):
    """Loss terms (left) and validation Recall@20 (right) per epoch."""
    path = Path(path)
    epochs = [row["epoch"] for row in curves]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for key, label in (("total", "total"), ("cf", "BPR"), ("kg", "KG"), ("ssl_u", "SSL user"), ("ssl_v", "SSL item")):
        ax_loss.plot(epochs, [row[key] for row in curves], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("symlog", linthresh=1e-3)
    ax_loss.legend(fontsize=8)
    ax_val.plot(epochs, [row["val_recall20"] for row in curves], color="tab:green")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation Recall@20")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_report(report, path):
    """Recall@k and NDCG@k bars for one :class:`~khgrec.evaluation.EvalReport`."""
    path = Path(path)
    ks = list(report.ks)
    x = range(len(ks))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [report.recall[k] for k in ks], width, label="Recall")
    ax.bar([i + width / 2 for i in x], [report.ndcg[k] for k in ks], width, label="NDCG")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"@{k}" for k in ks])
    ax.set_ylim(0, 1)
    ax.set_title(report.protocol)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
