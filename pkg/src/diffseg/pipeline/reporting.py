"""CSV and SVG outputs for training runs."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Mapping, Sequence

METRIC_COLUMNS = ["run_id", "split", "accuracy", "precision", "recall", "f1"]


def metrics_row(run_id: str, split: str, metrics: Mapping, **extra) -> dict:
    row = {"run_id": run_id, "split": split}
    for key in ("accuracy", "precision", "recall", "f1"):
        row[key] = metrics[key]
    per_class = metrics["per_class"]
    for key in ("precision", "recall", "f1"):
        for c, val in enumerate(per_class[key]):
            row[f"{key}_c{c}"] = val
    row["averaging"] = metrics.get("averaging", "macro")
    row.update(extra)
    return row


def append_csv(path: str | os.PathLike, row: Mapping) -> None:
    """Append ``row``; the header is written when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    if exists:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        if header != list(row):
            raise ValueError(f"{path}: existing columns {header} differ from {list(row)}")
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if not exists:
            writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in row.items()})


def write_csv(path: str | os.PathLike, rows: Sequence[Mapping]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_curve_svg(path: str | os.PathLike, series: Mapping[str, Sequence[float]],
                    title: str = "", width: int = 480, height: int = 300) -> None:
    """Polyline plot of one or more per-epoch series on shared axes."""
    pad = 40
    values = [v for ys in series.values() for v in ys]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(ys) for ys in series.values()), default=1)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def xy(i, v):
        x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)
        return f"{x:.1f},{y:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="4" y="{pad + 4}" font-size="10">{hi:.3g}</text>',
             f'<text x="4" y="{height - pad}" font-size="10">{lo:.3g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        color = colors[k % len(colors)]
        pts = " ".join(xy(i, v) for i, v in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 80}" y="{pad + 14 * k}" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
