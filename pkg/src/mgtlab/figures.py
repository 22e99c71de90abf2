"""Figure rendering for report payloads.

Renders the standard views of each report shape to PNG files next to the
delimited output: per-class F1 bars for a single evaluation, a labeled
heatmap for a transfer matrix, stage curves per technique for a
class-incremental run, and a keyword-frequency bar chart. Pure file
output — no interactive backends.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import EvalReport, TransferMatrix
from .util import ContractError


def render_eval_bars(report: EvalReport, path: str) -> str:
    classes = report.classes
    scores = [report.per_class[c]["f1"] for c in classes]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(classes) + 2), 3.5))
    ax.bar(range(len(classes)), scores, color="#4878a8")
    ax.axhline(report.macro_f1, color="#c44e52", linestyle="--",
               linewidth=1, label=f"macro F1 = {report.macro_f1:.3f}")
    ax.set_xticks(range(len(classes)))
    ax.set_xticklabels(classes, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(report.metadata.get("detector", report.task))
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_transfer_heatmap(matrix: TransferMatrix, path: str,
                            metric_class: str = "machine") -> str:
    """Source x target grid of class F1 (falls back to macro when the class
    is absent, e.g. attribution matrices)."""
    n = len(matrix.sources)
    grid = np.zeros((n, n))
    for i, s in enumerate(matrix.sources):
        for j, t in enumerate(matrix.targets):
            cell = matrix.cell(s, t)
            if metric_class in cell.per_class:
                grid[i, j] = cell.per_class[metric_class]["f1"]
            else:
                grid[i, j] = cell.macro_f1
    fig, ax = plt.subplots(figsize=(1.1 * n + 2.5, 1.1 * n + 2))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n))
    ax.set_xticklabels(matrix.targets, rotation=30, ha="right")
    ax.set_yticks(range(n))
    ax.set_yticklabels(matrix.sources)
    ax.set_xlabel("evaluated on")
    ax.set_ylabel("calibrated on")
    ax.set_title(f"transfer across {matrix.axis}")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                    color="white" if grid[i, j] < 0.6 else "black",
                    fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_cil_curves(result: dict, path: str) -> str:
    """Macro-F1 by stage, one line per technique; joint as a flat bound."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for technique in sorted(result):
        reports = result[technique]
        stages = [r.metadata.get("stage", i) for i, r in enumerate(reports)]
        values = [r.macro_f1 for r in reports]
        if technique == "joint":
            ax.axhline(values[-1], color="#555555", linestyle=":",
                       linewidth=1.2, label="joint (upper bound)")
        else:
            ax.plot(stages, values, marker="o", label=technique)
    ax.set_xlabel("stage")
    ax.set_ylabel("macro F1")
    ax.set_ylim(0, 1.05)
    ax.set_title("class-incremental update")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_keyword_profile(profile: dict, path: str, top: int = 25) -> str:
    """Horizontal bars of keyword hit counts, most frequent first."""
    items = sorted(profile.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    if not items:
        raise ContractError("empty keyword profile")
    names = [k for k, _ in items][::-1]
    counts = [v for _, v in items][::-1]
    fig, ax = plt.subplots(figsize=(6, 0.32 * len(items) + 1.5))
    ax.barh(range(len(names)), counts, color="#4878a8")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("documents matched")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_for(obj, stem: str) -> list:
    """Render every figure that applies to a report object; returns paths."""
    paths = []
    if isinstance(obj, EvalReport):
        paths.append(render_eval_bars(obj, f"{stem}_f1.png"))
    elif isinstance(obj, TransferMatrix):
        paths.append(render_transfer_heatmap(obj, f"{stem}_heatmap.png"))
    elif isinstance(obj, dict):
        paths.append(render_cil_curves(obj, f"{stem}_stages.png"))
    else:
        raise ContractError(f"no figure renderer for {type(obj).__name__}")
    return paths
