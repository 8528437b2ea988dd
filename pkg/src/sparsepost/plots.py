"""Figure rendering for the report path.

Each function takes already-parsed CSV rows and writes one PNG. Rendering is
headless (Agg); the CSVs remain the primary machine-readable output and the
figures sit next to them.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRIC_DIRECTIONS = {"acc": "higher is better", "nll": "lower is better",
                     "ece": "lower is better", "ess_mean": "higher is better"}


def _new_axes(xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=150)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def metric_vs_sparsity(rows: list[dict], metric: str, path: Path) -> None:
    """One line per method: metric value against sparsity rate."""
    by_method = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            by_method[r["method"]].append((float(r["sparsity"]), float(r["value"])))
    fig, ax = _new_axes("sparsity rate", metric)
    for method in sorted(by_method):
        pts = sorted(by_method[method])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    if METRIC_DIRECTIONS.get(metric):
        ax.set_title(f"{metric} vs sparsity ({METRIC_DIRECTIONS[metric]})", fontsize=10)
    ax.legend(fontsize=8)
    _save(fig, path)


def trace_figure(rows: list[dict], path: Path) -> None:
    """Instantaneous test NLL per epoch, one line per chain."""
    by_chain = defaultdict(list)
    for r in rows:
        by_chain[int(r["chain"])].append((int(r["epoch"]), float(r["inll"])))
    fig, ax = _new_axes("epoch", "instantaneous NLL")
    for chain in sorted(by_chain):
        pts = sorted(by_chain[chain])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"chain {chain}", alpha=0.8)
    if len(by_chain) > 1:
        ax.legend(fontsize=8)
    _save(fig, path)


def acf_figure(rows: list[dict], path: Path) -> None:
    lags = [int(r["lag"]) for r in rows]
    rhos = [float(r["rho"]) for r in rows]
    fig, ax = _new_axes("lag", "autocorrelation")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.vlines(lags, 0.0, rhos, linewidth=2.0)
    ax.plot(lags, rhos, "o", markersize=3)
    _save(fig, path)


def cumsum_figure(rows: list[dict], path: Path) -> None:
    idx = [int(r["index"]) for r in rows]
    d = [float(r["d"]) for r in rows]
    fig, ax = _new_axes("sample index", "cumulative deviation")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.plot(idx, d)
    _save(fig, path)
