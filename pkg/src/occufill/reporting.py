"""Consolidated metric reports: flat CSV, structured JSON, and figures.

The CSV/JSON pair is byte-deterministic for fixed inputs (no wall times, fixed
float formatting); figures are rendered alongside for human consumption.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CSV_COLUMNS = [
    "sample", "seed", "prompt_kind", "variant",
    "mse_whole", "psnr_whole", "ssim_whole",
    "mse_visible", "psnr_visible", "ssim_visible",
    "mse_invisible", "psnr_invisible", "ssim_invisible",
    "joint_error", "missing_joints",
    "mask_miou", "mask_l1",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_report(out_dir, rows: list, aggregates: dict, metadata: dict) -> dict:
    """Persist rows + aggregates; returns the consolidated document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    doc = {"metadata": metadata, "aggregates": aggregates, "row_count": len(rows)}
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    return doc


def aggregate_rows(rows: list) -> dict:
    """Mean of each numeric column per (prompt_kind, variant) group."""
    groups: dict = {}
    for row in rows:
        key = f"{row['prompt_kind']}/{row['variant']}"
        groups.setdefault(key, []).append(row)
    numeric = [c for c in CSV_COLUMNS if c not in ("sample", "seed", "prompt_kind", "variant")]
    out = {}
    for key, members in sorted(groups.items()):
        agg = {"count": len(members)}
        agg["pairs"] = sorted({(m["sample"], m["seed"]) for m in members})
        agg["pairs"] = [f"{s}#{seed}" for s, seed in agg["pairs"]]
        for col in numeric:
            vals = [m[col] for m in members if m.get(col) is not None]
            agg[col] = float(np.mean(vals)) if vals else None
        out[key] = agg
    return out


def plot_metric_bars(out_dir, aggregates: dict, metric: str, fname: str, title: str) -> Path:
    keys = [k for k in sorted(aggregates) if aggregates[k].get(metric) is not None]
    if not keys:
        return None
    values = [aggregates[k][metric] for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, len(keys) * 1.1), 3.2))
    ax.bar(range(len(keys)), values, color="#4878cf")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    path = Path(out_dir) / "figures" / fname
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(out_dir, xs, ys, xlabel, ylabel, fname, title) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.plot(xs, ys, marker="o", color="#d65f5f")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(out_dir) / "figures" / fname
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_stage_grid(out_dir, panels: dict, fname: str, title: str) -> Path:
    """Rows = pipeline stages, columns = seeds (mirrors the UI comparison view)."""
    stage_names = list(panels)
    n_seeds = len(next(iter(panels.values())))
    fig, axes = plt.subplots(
        len(stage_names), n_seeds,
        figsize=(1.6 * n_seeds, 1.6 * len(stage_names)), squeeze=False)
    for r, stage in enumerate(stage_names):
        for c, img in enumerate(panels[stage]):
            ax = axes[r][c]
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(img)
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(stage, fontsize=7)
            if r == 0:
                ax.set_title(f"seed {c}", fontsize=7)
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(out_dir) / "figures" / fname
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
