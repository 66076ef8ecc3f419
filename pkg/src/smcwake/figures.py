"""Figure rendering for the report path: every chart is drawn from data that
is also written as CSV next to it, so downstream tools never need matplotlib.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "render_kl_curves",
    "render_comparison_curves",
    "render_scatter",
    "render_surrogate_table",
]


def _finite(xs, ys):
    import numpy as np

    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = np.isfinite(ys)
    return xs[keep], ys[keep]


def render_kl_curves(rows: list[dict], out_path) -> Path | None:
    """Forward/reverse/symmetric KL vs step on a log scale."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for key, label in (("fwd_kl", "forward KL"), ("rev_kl", "reverse KL"),
                       ("sym_kl", "symmetric KL")):
        xs, ys = _finite([r["step"] for r in rows], [r[key] for r in rows])
        if len(xs):
            ax.plot(xs, ys, label=label)
            drew = True
    if not drew:
        plt.close(fig)
        return None
    ax.set_xlabel("gradient step")
    ax.set_ylabel("average divergence")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title(rows[0].get("method", ""))
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_comparison_curves(runs: dict[str, list[dict]], out_path,
                             key: str = "fwd_kl") -> Path | None:
    """Overlay one divergence curve per run; used by the compare report."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for label, rows in runs.items():
        xs, ys = _finite([r["step"] for r in rows], [r[key] for r in rows])
        if len(xs):
            ax.plot(xs, ys, label=label)
            drew = True
    if not drew:
        plt.close(fig)
        return None
    ax.set_xlabel("gradient step")
    ax.set_ylabel("average forward KL")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_scatter(groups: dict[str, "object"], out_path, title: str = "") -> Path:
    """2-D scatter of latent samples, one color per labelled group."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, pts in groups.items():
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.4, label=label)
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    ax.legend(markerscale=3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_surrogate_table(rows: list[dict], out_path) -> Path:
    """Bar chart of surrogate objective means with error bars."""
    import numpy as np

    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r["proposal"] for r in rows]
    means = np.array([r["mean"] for r in rows])
    ses = np.array([r["standard_error"] for r in rows])
    ax.bar(range(len(rows)), means, yerr=3 * ses, capsize=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("surrogate objective")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
