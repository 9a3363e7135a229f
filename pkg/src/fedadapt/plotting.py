"""Static PNG figures for experiment reports.

Figures are drawn on a bare ``Figure`` with the Agg canvas, so importing this
module never touches the global pyplot state or needs a display.  PNGs are
written without a software-version stamp so reruns produce identical bytes.
"""

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {"figsize": (5.0, 3.2), "dpi": 100}
METHOD_LABELS = {
    "baseline": "global model",
    "finetune": "fine-tune",
    "random": "random groups",
    "federated": "federated adaptation",
    "pfa": "sparsity groups",
}


def _new(**kw):
    fig = Figure(figsize=kw.get("figsize", STYLE["figsize"]), dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})


def plot_fl_history(history, path):
    """Mean train and test accuracy per round, with the per-client test spread."""
    fig, ax = _new()
    rounds = [m.round + 1 for m in history]
    test = np.array([[m.test_acc[c] for c in sorted(m.test_acc)] for m in history])
    ax.fill_between(rounds, test.min(axis=1), test.max(axis=1), color="C0", alpha=0.15, lw=0)
    ax.plot(rounds, test.mean(axis=1), color="C0", label="test")
    ax.plot(rounds, [m.mean_train_acc for m in history], color="C1", ls="--", label="train")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_method_accuracy(accuracy, path):
    """Mean accuracy per method with per-client points."""
    fig, ax = _new()
    names = list(accuracy)
    for i, name in enumerate(names):
        values = np.array(list(accuracy[name].values()))
        ax.bar(i, values.mean(), color=f"C{i}", alpha=0.6)
        jitter = np.linspace(-0.25, 0.25, len(values))
        ax.plot(i + jitter, values, ".", color="k", ms=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([METHOD_LABELS.get(n, n) for n in names], rotation=20, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    _save(fig, path)


def plot_similarity(similarity, path):
    """Heat map for a full matrix, sorted distances for an anchor vector."""
    if hasattr(similarity, "entries"):
        fig, ax = _new(figsize=(4.4, 3.8))
        im = ax.imshow(similarity.entries, cmap="viridis")
        ticks = range(0, similarity.n, max(1, similarity.n // 10))
        ax.set_xticks(list(ticks))
        ax.set_yticks(list(ticks))
        ax.set_xticklabels([similarity.client_ids[i] for i in ticks])
        ax.set_yticklabels([similarity.client_ids[i] for i in ticks])
        fig.colorbar(im, ax=ax, label="distance")
    else:
        fig, ax = _new()
        order = np.argsort(similarity.distances, kind="stable")
        ax.plot(range(len(order)), similarity.distances[order], "o-", ms=3)
        ax.set_xticks(range(len(order)))
        ax.set_xticklabels([similarity.client_ids[i] for i in order], fontsize=6)
        ax.set_xlabel("client (sorted)")
        ax.set_ylabel(f"distance to client {similarity.anchor_id}")
    _save(fig, path)


def plot_sweep(summary, path):
    """Separation ratio per ReLU index, one line per q."""
    fig, ax = _new()
    for i, q in enumerate(sorted({q for _, q in summary})):
        relus = sorted(r for r, qq in summary if qq == q)
        ax.plot(relus, [summary[(r, q)] for r in relus], "o-", color=f"C{i}", label=f"q={q}")
    ax.set_xlabel("ReLU index")
    ax.set_ylabel("separation ratio")
    ax.legend(frameon=False)
    _save(fig, path)
