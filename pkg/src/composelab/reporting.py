"""File emission for the report path: JSON/CSV tables, PGM mask dumps, and
matplotlib figures rendered alongside every delimited output."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import objectives as ob  # noqa: E402
from .evaluation import EvalReport  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "composelab",
})

METRIC_COLUMNS = ("protocol", "n_prompts", "threshold", "success_rate",
                  "alignment_mean", "alignment_std", "frechet",
                  "mask_overlap_mean", "mask_overlap_peak",
                  "min_max_activation")


def write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_report_csv(path, reports: list[EvalReport]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rep in reports:
            d = rep.to_dict()
            writer.writerow([d[c] for c in METRIC_COLUMNS])


def save_pgm(path, mask: np.ndarray) -> None:
    """Max-normalized 8-bit grayscale PGM (P5)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    peak = float(mask.max())
    scaled = np.zeros_like(mask) if peak <= 0 else mask / peak
    data = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def export_heatmaps(out_dir, masks: ob.ConceptMasks, names: list[str],
                    image: np.ndarray | None = None,
                    tag: str = "masks") -> list[str]:
    """Per-concept PGM + exact raw floats + one composite panel figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    raw = {}
    for name, mask in zip(names, masks.masks):
        pgm = out / f"{tag}_{name}.pgm"
        save_pgm(pgm, mask.data)
        written.append(str(pgm))
        raw[name] = mask.data.tolist()
    raw_path = out / f"{tag}_raw.json"
    write_json(raw_path, {"timestep": masks.timestep,
                          "prompt": masks.prompt_id, "masks": raw})
    written.append(str(raw_path))

    ncols = len(names) + (1 if image is not None else 0)
    fig, axes = plt.subplots(1, ncols, figsize=(2.2 * ncols, 2.6))
    axes = np.atleast_1d(axes)
    col = 0
    if image is not None:
        axes[0].imshow(np.clip(image, 0, 1))
        axes[0].set_title("sample")
        col = 1
    vmax = max(float(m.data.max()) for m in masks.masks) or 1.0
    for j, (name, mask) in enumerate(zip(names, masks.masks)):
        ax = axes[col + j]
        im = ax.imshow(mask.data, cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(name, fontsize=8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
    fig.colorbar(im, ax=axes.tolist(), shrink=0.8)
    panel = out / f"{tag}_panel.png"
    fig.savefig(panel)
    plt.close(fig)
    written.append(str(panel))
    return written


def report_figure(path, reports: list[EvalReport]) -> None:
    """Bar panel of the headline metrics across protocols/variants."""
    labels = [rep.protocol for rep in reports]
    panels = [("success_rate", "success rate"),
              ("alignment_mean", "alignment proxy"),
              ("frechet", "Frechet distance"),
              ("min_max_activation", "weakest-peak activation")]
    panels = [(k, t) for k, t in panels
              if any(getattr(r, k) is not None for r in reports)]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.0))
    axes = np.atleast_1d(axes)
    x = np.arange(len(reports))
    for ax, (key, title) in zip(axes, panels):
        vals = [getattr(r, key) if getattr(r, key) is not None else np.nan
                for r in reports]
        ax.bar(x, vals, color="#4878cf")
        if key == "alignment_mean":
            errs = [r.alignment_std for r in reports]
            ax.errorbar(x, vals, yerr=errs, fmt="none", ecolor="black",
                        capsize=3, lw=1)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def training_curves(path, log: list[dict]) -> None:
    """Loss trajectories from a base-training or finetune log."""
    keys = [k for k in ("loss", "loss_sep", "loss_en", "loss_norm", "loss_total")
            if any(rec.get(k) is not None for rec in log)]
    steps = [rec["step"] for rec in log]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for k in keys:
        ys = [rec.get(k) for rec in log]
        xs = [s for s, y in zip(steps, ys) if y is not None]
        ax.plot(xs, [y for y in ys if y is not None], label=k, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def ablation_table(path_csv, path_png, rows: list[dict]) -> None:
    """Rows: {"variant": str, "report": EvalReport}; CSV plus grouped bars."""
    Path(path_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant",) + METRIC_COLUMNS[3:])
        for row in rows:
            d = row["report"].to_dict()
            writer.writerow([row["variant"]] + [d[c] for c in METRIC_COLUMNS[3:]])
    reports = []
    for row in rows:
        rep = row["report"]
        rep = EvalReport(**{**rep.to_dict(), "prompts": []})
        rep.protocol = row["variant"]
        reports.append(rep)
    report_figure(path_png, reports)
