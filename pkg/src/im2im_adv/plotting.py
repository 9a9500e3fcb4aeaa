"""PNG contact sheets and metric-vs-budget line plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .core import load_array, to_uint8  # noqa: E402
from .report import AttackReport  # noqa: E402

PANEL_ZOOM = 4
GUTTER = 2


def render_contact_sheet(panels: list[np.ndarray], zoom: int = PANEL_ZOOM) -> np.ndarray:
    """Side-by-side uint8 RGB strip of ``panels`` (H x W x C in [0, 1]), nearest-neighbour zoomed."""
    tiles = []
    for p in panels:
        u8 = to_uint8(p)
        if u8.ndim == 2:
            u8 = u8[:, :, None]
        if u8.shape[2] == 1:
            u8 = np.repeat(u8, 3, axis=2)
        tiles.append(np.kron(u8, np.ones((zoom, zoom, 1), dtype=np.uint8)))
    h = tiles[0].shape[0]
    gap = np.full((h, GUTTER, 3), 255, dtype=np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(gap)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def _panel_path(image_dir: Path, image_id: int, panel: str) -> Path:
    return image_dir / f"{image_id:03d}_{panel}.f32"


def emit_figures(report: AttackReport, directory=None) -> list[Path]:
    """One contact sheet per row (perturbed input | attacked output | clean output | perturbation), plus a loss-vs-angle plot when present."""
    if not report.rows:
        return []
    image_dir = Path(report.artifacts["image_dir"])
    panels = report.artifacts.get("panels", ())
    out_dir = Path(directory) if directory is not None else image_dir.parent / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for row in report.rows:
        arrays = []
        for panel in panels:
            path = _panel_path(image_dir, row["image_id"], panel)
            if not path.exists():
                raise FileNotFoundError(f"missing artifact {path}")
            arrays.append(load_array(path)[0])
        dest = out_dir / f"{report.name}_{row['image_id']:03d}.png"
        Image.fromarray(render_contact_sheet(arrays)).save(dest, format="PNG")
        paths.append(dest)
    if "per_angle" in report.extra_tables:
        _, rows = report.extra_tables["per_angle"]
        paths.append(
            line_plot(
                [r["theta_deg"] for r in rows], {"mean loss": [r["mean_loss"] for r in rows]},
                "rotation (degrees)", "mapping loss", out_dir / f"{report.name}_loss_vs_angle.png",
            )
        )
    return paths


def line_plot(xs, series: dict, xlabel: str, ylabel: str, dest) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xticks(list(xs))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(dest, format="png", metadata={"Software": None})
    plt.close(fig)
    return dest


SWEEP_SERIES = ("PO_vs_O", "PO_vs_It", "PI_vs_Iorig")


def emit_sweep_figures(summary: list[dict], directory) -> list[Path]:
    """One metric-vs-budget plot per attack with more than one budget value."""
    paths = []
    by_attack: dict[str, list[dict]] = {}
    for row in summary:
        by_attack.setdefault(row["attack"], []).append(row)
    xlabels = {"universal": "xi (8-bit units)", "flow": "xi_f (pixels)"}
    for attack, rows in by_attack.items():
        if len(rows) < 2 or attack not in xlabels:
            continue
        rows = sorted(rows, key=lambda r: r["budget"])
        xs = [r["budget"] for r in rows]
        series = {k: [r[k] for r in rows] for k in SWEEP_SERIES}
        paths.append(line_plot(xs, series, xlabels[attack], "perceptual distance", Path(directory) / f"{attack}_sweep.png"))
        if not all(np.isnan(r["per_pixel_acc"]) for r in rows):
            paths.append(
                line_plot(xs, {"per-pixel acc": [r["per_pixel_acc"] for r in rows]}, xlabels[attack], "segmentation accuracy",
                          Path(directory) / f"{attack}_seg_sweep.png")
            )
    return paths
