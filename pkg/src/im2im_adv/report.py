"""Per-image report rows, aggregates and CSV/JSON serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ImageBuffer
from .metrics import DEFAULT_METRIC, PerceptualMetric, label_outputs, perceptual_distance, psnr, seg_scores

CSV_COLUMNS = (
    "image_id",
    "attack",
    "domain",
    "PO_vs_O",
    "PO_vs_It",
    "PI_vs_Iorig",
    "psnr",
    "per_pixel_acc",
    "per_class_acc",
    "class_iou",
)

METRIC_COLUMNS = CSV_COLUMNS[3:]


def metric_row(
    image_id: int,
    attack: str,
    domain: str,
    perturbed_input: ImageBuffer,
    original_input: ImageBuffer,
    perturbed_output: ImageBuffer,
    clean_output: ImageBuffer,
    target: ImageBuffer,
    seg_labels=None,
    palette=None,
    num_classes: int | None = None,
    metric: PerceptualMetric = DEFAULT_METRIC,
    **extra,
) -> dict:
    """One row with the PO/O/PI/I_t comparisons used throughout the reports."""
    row = {
        "image_id": int(image_id),
        "attack": attack,
        "domain": domain,
        "PO_vs_O": perceptual_distance(metric, perturbed_output, clean_output),
        "PO_vs_It": perceptual_distance(metric, perturbed_output, target),
        "PI_vs_Iorig": perceptual_distance(metric, perturbed_input, original_input),
        "psnr": psnr(perturbed_input, original_input),
    }
    if seg_labels is not None and palette is not None:
        s = seg_scores(label_outputs(perturbed_output, palette), seg_labels, num_classes or len(palette))
        row.update(per_pixel_acc=s.per_pixel_acc, per_class_acc=s.per_class_acc, class_iou=s.class_iou)
    else:
        row.update(per_pixel_acc=float("nan"), per_class_acc=float("nan"), class_iou=float("nan"))
    row.update(extra)
    return row


def aggregate(rows: list[dict], columns=METRIC_COLUMNS) -> dict:
    """Mean and population std of each numeric column (NaN entries skipped)."""
    out = {}
    for col in columns:
        vals = np.array([r[col] for r in rows if col in r and r[col] is not None], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size:
            out[col] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": int(vals.size)}
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k in ("attack", "domain"):
                continue
            if v == "":
                r[k] = float("nan")
            else:
                try:
                    r[k] = int(v) if k == "image_id" else float(v)
                except ValueError:
                    pass
    return rows


@dataclass
class AttackReport:
    config: dict
    rows: list[dict]
    aggregates: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    extra_tables: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    @property
    def name(self) -> str:
        return self.config.get("name", "report")

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "aggregates": self.aggregates,
            "artifacts": {k: [str(p) for p in v] if isinstance(v, (list, tuple)) else str(v) for k, v in self.artifacts.items()},
            "timings": self.timings,
        }

    def write(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{self.name}.csv"
        csv_path.write_text(self.csv_text())
        paths = {"csv": csv_path}
        for key, (columns, rows) in self.extra_tables.items():
            p = directory / f"{self.name}_{key}.csv"
            p.write_text(rows_to_csv(rows, columns))
            paths[key] = p
        json_path = directory / f"{self.name}.json"
        self.artifacts.update({k: v for k, v in paths.items()})
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        paths["json"] = json_path
        return paths
