"""Static report artifacts: attribute histograms, accuracy-vs-Hausdorff
scatter, per-head alpha bars and metric table rows. Every plot is written
next to a CSV holding the plotted numbers."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import ObjectAttributes  # noqa: E402
from .metrics import METRIC_LABELS, METRIC_ORDER, MetricReport  # noqa: E402


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def attribute_histograms(attrs: Mapping[str, ObjectAttributes], out_dir) -> List[Path]:
    out = Path(out_dir)
    rows = [{"image_id": k, **a.as_row()} for k, a in attrs.items()]
    header = ["image_id", "concentration", "avg_color_ratio", "area_ratio", "num_parts", "centroid_x", "centroid_y", "empty"]
    csv_path = _write_csv(out / "attributes.csv", header, ([r[h] for h in header] for r in rows))
    valid = [r for r in rows if not r["empty"]]
    fig, axes = plt.subplots(1, 5, figsize=(18, 3.2))
    for ax, key in zip(axes[:4], ["concentration", "avg_color_ratio", "area_ratio", "num_parts"]):
        ax.hist([r[key] for r in valid], bins=20, color="tab:blue")
        ax.set_title(key.replace("_", " "))
    axes[4].hist2d(
        [r["centroid_x"] for r in valid] or [0.5],
        [r["centroid_y"] for r in valid] or [0.5],
        bins=10,
        range=[[0, 1], [0, 1]],
        cmap="viridis",
    )
    axes[4].set_title("normalized centroid")
    axes[4].invert_yaxis()
    fig.tight_layout()
    png = out / "attributes.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [csv_path, png]


def hausdorff_scatter(points: Mapping[str, tuple], out_dir) -> List[Path]:
    """points: template-set name -> (hausdorff distance, accuracy or None)."""
    out = Path(out_dir)
    csv_path = _write_csv(
        out / "hausdorff.csv",
        ["template_set", "hausdorff", "accuracy"],
        ((k, h, "" if a is None else a) for k, (h, a) in points.items()),
    )
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, (h, a) in points.items():
        y = np.nan if a is None else a
        ax.scatter(h, y)
        ax.annotate(name, (h, 0 if a is None else a), fontsize=8)
    ax.set_xlabel("Hausdorff distance (train vs test classes)")
    ax.set_ylabel("classification accuracy")
    fig.tight_layout()
    png = out / "hausdorff.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [csv_path, png]


def alpha_chart(alphas: Mapping[int, Sequence[float]], out_dir) -> List[Path]:
    """One bar per (decoding layer, head)."""
    out = Path(out_dir)
    rows = [(layer, h, float(v)) for layer, vals in sorted(alphas.items()) for h, v in enumerate(vals)]
    csv_path = _write_csv(out / "alpha.csv", ["layer", "head", "alpha"], rows)
    fig, ax = plt.subplots(figsize=(6, 3))
    labels = [f"L{layer}-h{h}" for layer, h, _ in rows]
    ax.bar(range(len(rows)), [v for *_, v in rows], color=[f"C{layer}" for layer, *_ in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("alpha (edge weight)")
    fig.tight_layout()
    png = out / "alpha.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [csv_path, png]


def metric_table(reports: Mapping[str, MetricReport], out_dir) -> List[Path]:
    out = Path(out_dir)
    rows = [[name] + [f"{r.aggregate[k]:.3f}" for k in METRIC_ORDER] for name, r in reports.items()]
    csv_path = _write_csv(out / "table.csv", ["model"] + [METRIC_LABELS[k] for k in METRIC_ORDER], rows)
    tsv = out / "table.tsv"
    tsv.write_text(
        "model\t" + MetricReport.table_header() + "\n" + "".join("\t".join(r) + "\n" for r in rows)
    )
    return [csv_path, tsv]


def loss_curve(log_records: Sequence[dict], out_dir) -> List[Path]:
    out = Path(out_dir)
    steps = [r["step"] for r in log_records]
    totals = [r["total"] for r in log_records]
    csv_path = _write_csv(out / "loss.csv", ["step", "total"], zip(steps, totals))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, totals)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    fig.tight_layout()
    png = out / "loss.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [csv_path, png]
