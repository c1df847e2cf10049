"""Report emission: delimited files plus rendered figures.

Every report path writes machine-readable CSV next to a human-oriented
artifact (pretty text and a matplotlib figure), so runs can be inspected
without re-running anything.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .images import pad_width_to_multiple, normalize_intensity, resize_to_height, save_png
from .metrics import EvalReport
from .rendering import RendererBackend, RenderParams, render

__all__ = [
    "write_eval_report",
    "save_loss_curves",
    "write_ablation_outputs",
    "emit_sample_grid",
]


def write_eval_report(rows: list[dict], aggregate: EvalReport, out_dir, stem: str = "report") -> dict:
    """Per-sample CSV, aggregate CSV, pretty text, and a WER histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_sample = out / f"{stem}_samples.csv"
    with per_sample.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "wer", "exact", "ref_len"])
        writer.writeheader()
        writer.writerows(rows)

    agg_csv = out / f"{stem}.csv"
    with agg_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wer", "exprate", "n_samples", "perplexity"])
        writer.writerow([aggregate.wer, aggregate.exprate, aggregate.n_samples,
                         "" if aggregate.perplexity is None else aggregate.perplexity])

    text = out / f"{stem}.txt"
    lines = [
        f"samples   {aggregate.n_samples}",
        f"WER       {aggregate.wer:.4f}",
        f"ExpRate   {aggregate.exprate:.2f}%",
    ]
    if aggregate.perplexity is not None:
        lines.append(f"perplexity {aggregate.perplexity:.4f}")
    text.write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig_path = out / f"{stem}_wer_hist.png"
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist([r["wer"] for r in rows], bins=20, color="#3566a5")
    ax.set_xlabel("per-sample WER")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    return {"samples": str(per_sample), "aggregate": str(agg_csv), "text": str(text), "figure": str(fig_path)}


def save_loss_curves(metrics_csv, out_png) -> str:
    """Plot the l_d / l_g / l_t columns of a training metrics CSV."""
    steps, l_d, l_g, l_t = [], [], [], []
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            l_d.append(float(row["l_d"]))
            l_g.append(float(row["l_g"]))
            l_t.append(float(row["l_t"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, l_d, label="discriminator")
    ax.plot(steps, l_g, label="generator")
    ax.plot(steps, l_t, label="task")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return str(out_png)


def write_ablation_outputs(variants: list[str], iterations: list[int], table: dict, out_dir, meta: dict | None = None) -> dict:
    """CSV + JSON + line-plot figure for a (variant x iteration) perplexity table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "ablation.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + [str(i) for i in iterations])
        for name in variants:
            writer.writerow([name] + [table[(name, it)] for it in iterations])

    json_path = out / "ablation.json"
    json_path.write_text(
        json.dumps(
            {
                "variants": variants,
                "iterations": iterations,
                "perplexity": {name: {str(it): table[(name, it)] for it in iterations} for name in variants},
                "meta": meta or {},
            },
            indent=2,
        ),
        encoding="utf-8",
    )

    fig_path = out / "ablation.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in variants:
        ax.plot(iterations, [table[(name, it)] for it in iterations], marker="o", label=name)
    ax.set_xlabel("GAN iteration")
    ax.set_ylabel("perplexity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    return {"csv": str(csv_path), "json": str(json_path), "figure": str(fig_path)}


GRID_GUTTER = 8
GRID_ROW_GAP = 4


def emit_sample_grid(checkpoint_path, formulas: list[str], out_path, backend: RendererBackend, seed: int = 0,
                     font_size: int = 32) -> np.ndarray:
    """Side-by-side grid: left the rendered input, right the synthesized
    translation, one row per formula.  Grid width is exactly twice the
    widest formula plus the gutter."""
    from .data import record_seed
    from .training import load_generator

    gen, _, cfg = load_generator(checkpoint_path)
    height = int(cfg["input_height"])
    rows = []
    with torch.no_grad():
        for i, latex in enumerate(formulas):
            img = resize_to_height(render(latex, RenderParams(font_size=font_size), backend), height)
            w = img.shape[1]
            padded = pad_width_to_multiple(img, 16)
            zgen = torch.Generator().manual_seed(record_seed(seed, f"grid{i}") % 2**63)
            z = torch.randn(1, gen.cfg.z_dim, generator=zgen)
            fake = gen(torch.from_numpy(padded).unsqueeze(0).unsqueeze(0), z, torch.tensor([1]))
            rows.append((img, normalize_intensity(fake[0, 0, :, :w].numpy())))

    max_w = max(img.shape[1] for img, _ in rows)
    grid_w = 2 * max_w + GRID_GUTTER
    grid_h = len(rows) * height + (len(rows) - 1) * GRID_ROW_GAP
    grid = np.zeros((grid_h, grid_w), dtype=np.float32)
    for r, (left, right) in enumerate(rows):
        top = r * (height + GRID_ROW_GAP)
        grid[top : top + height, : left.shape[1]] = left
        grid[top : top + height, max_w + GRID_GUTTER : max_w + GRID_GUTTER + right.shape[1]] = right
    save_png(grid, out_path)
    return grid
