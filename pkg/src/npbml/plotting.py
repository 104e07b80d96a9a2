"""Plot data as (step, value) CSV columns, plus a rendered PNG of the same data."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return path


def learning_curve(records: list[dict], out_dir, stem: str = "learning_curve") -> tuple[Path, Path]:
    """Meta-loss and validation curves from a metrics log."""
    out_dir = Path(out_dir)
    rows = [(r["step"], r.get("meta_loss"), r.get("val_loss"), r.get("val_accuracy")) for r in records]
    csv_path = write_csv(out_dir / f"{stem}.csv", ["step", "meta_loss", "val_loss", "val_accuracy"], rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    train = [(s, m) for s, m, _, _ in rows if m is not None]
    val = [(s, v) for s, _, v, _ in rows if v is not None]
    if train:
        ax.plot(*zip(*train), lw=0.8, alpha=0.6, label="meta-batch query loss")
    if val:
        ax.plot(*zip(*val), "o-", label="validation query loss")
    ax.set_xlabel("meta-step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return csv_path, png


def ablation_chart(rows: list[dict], out_dir, metric: str, stem: str = "ablation") -> tuple[Path, Path]:
    """Bar chart of per-row mean with its confidence half-width."""
    out_dir = Path(out_dir)
    csv_path = write_csv(out_dir / f"{stem}_plot.csv", ["row", "value", "half_width"],
                         [(r["row"], r.get("mean"), r.get("half_width")) for r in rows])
    ok = [r for r in rows if r.get("mean") is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    if ok:
        ax.bar([f"({r['row']})" for r in ok], [r["mean"] for r in ok],
               yerr=[r["half_width"] for r in ok], capsize=3)
    ax.set_xlabel("variant")
    ax.set_ylabel(metric)
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return csv_path, png
