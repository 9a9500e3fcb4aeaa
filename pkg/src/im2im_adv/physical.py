"""Quasi-physical attack: exhaustive search over similarity transforms of the input."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ImageBuffer, PairedDataset
from .errors import ConfigError, DimensionError
from .geometry import SimilarityParams, apply_similarity
from .metrics import DEFAULT_METRIC, PerceptualMetric
from .models import Im2ImModel, generate, generate_batch
from .report import metric_row

DEFAULT_MAX_TUPLES = 10_000
NORMS = ("l1", "l2")
IDENTITY_KEY = (0.0, 0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class TransformGrid:
    """Candidate rotations (degrees), scales and translations (pixels).

    With ``isotropic`` the scale lists are zipped (sx == sy pairs) instead of
    crossed.  The identity is always part of the search space.
    """

    rotations: tuple = (0.0,)
    scales_x: tuple = (1.0,)
    scales_y: tuple = (1.0,)
    translations_u: tuple = (0.0,)
    translations_v: tuple = (0.0,)
    isotropic: bool = False

    def __post_init__(self):
        for name in ("rotations", "scales_x", "scales_y", "translations_u", "translations_v"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ConfigError(f"grid list {name!r} is empty")
            if not all(math.isfinite(v) for v in vals):
                raise ConfigError(f"grid list {name!r} has non-finite values")
            object.__setattr__(self, name, vals)
        if any(s <= 0 for s in self.scales_x + self.scales_y):
            raise ConfigError("scales must be positive")
        if self.isotropic and self.scales_x != self.scales_y:
            raise ConfigError("isotropic grid needs scales_x == scales_y")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "TransformGrid":
        cfg = dict(cfg)
        if "scales" in cfg:
            s = cfg.pop("scales")
            cfg.setdefault("scales_x", s)
            cfg.setdefault("scales_y", s)
            cfg.setdefault("isotropic", True)
        if "translations" in cfg:
            t = cfg.pop("translations")
            cfg.setdefault("translations_u", t)
            cfg.setdefault("translations_v", t)
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**cfg)

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    def _scales(self):
        if self.isotropic:
            return [(s, s) for s in self.scales_x]
        return list(itertools.product(self.scales_x, self.scales_y))

    def keys(self) -> list[tuple]:
        """Sorted, de-duplicated (du, dv, theta_deg, sx, sy) tuples, identity included."""
        out = {
            (du, dv, rot, sx, sy)
            for du in self.translations_u
            for dv in self.translations_v
            for rot in self.rotations
            for sx, sy in self._scales()
        }
        out.add(IDENTITY_KEY)
        return sorted(out)

    def size(self) -> int:
        return len(self.keys())


def default_grid(width: int = 32) -> TransformGrid:
    """0 to 3.5 degrees in 0.5 degree steps, isotropic scales {0.85, 0.95}, translations {10, 20} px on a 256-wide frame."""
    k = width / 256.0
    return TransformGrid(
        rotations=tuple(0.5 * i for i in range(8)),
        scales_x=(0.85, 0.95),
        scales_y=(0.85, 0.95),
        translations_u=(10 * k, 20 * k),
        translations_v=(10 * k, 20 * k),
        isotropic=True,
    )


def params_from_key(key: tuple) -> SimilarityParams:
    du, dv, rot, sx, sy = key
    return SimilarityParams(du, dv, math.radians(rot), sx, sy)


def _loss_between(out: np.ndarray, target: np.ndarray, norm: str) -> float:
    diff = out - target
    if norm == "l1":
        return float(np.mean(np.abs(diff)))
    return float(np.sqrt(np.mean(diff * diff)))


def _check_norm(norm):
    if norm not in NORMS:
        raise ConfigError(f"norm must be one of {NORMS}, got {norm!r}")


def mapping_loss(model: Im2ImModel, x: ImageBuffer, target: ImageBuffer, norm: str = "l1") -> float:
    """l1 (mean absolute) or l2 (root mean square) distance between G(x) and ``target``."""
    _check_norm(norm)
    if x.shape != target.shape:
        raise DimensionError(f"x {x.shape} vs target {target.shape}")
    return _loss_between(generate(model, x).values, target.values, norm)


@dataclass(eq=False)
class PhysicalAttackResult:
    best_params: SimilarityParams
    best_key: tuple
    best_loss: float
    identity_loss: float
    loss_table: dict = field(repr=False, default_factory=dict)

    @property
    def loss_ratio(self) -> float:
        if self.identity_loss == 0.0:
            return 1.0 if self.best_loss == 0.0 else math.inf
        return self.best_loss / self.identity_loss


def search_transform(
    model: Im2ImModel,
    x: ImageBuffer,
    target: ImageBuffer,
    grid: TransformGrid,
    norm: str = "l1",
    max_tuples: int = DEFAULT_MAX_TUPLES,
) -> PhysicalAttackResult:
    """Evaluate every grid transform of ``x`` (black fill) and keep the one with the largest loss.

    Ties go to the lexicographically smallest (du, dv, theta_deg, sx, sy).
    """
    _check_norm(norm)
    if x.shape != target.shape:
        raise DimensionError(f"x {x.shape} vs target {target.shape}")
    keys = grid.keys()
    if len(keys) > max_tuples:
        raise ConfigError(f"grid has {len(keys)} tuples, cap is {max_tuples}")
    table = {}
    for key in keys:
        warped = apply_similarity(x, params_from_key(key), fill=0.0)
        table[key] = mapping_loss(model, warped, target, norm)
    # keys are sorted, so the first maximum is the lexicographic tie-break
    best_key = keys[0]
    for key in keys:
        if table[key] > table[best_key]:
            best_key = key
    return PhysicalAttackResult(params_from_key(best_key), best_key, table[best_key], table[IDENTITY_KEY], table)


LOSS_TABLE_COLUMNS = ("image_id", "du", "dv", "theta_deg", "sx", "sy", "loss")
ANGLE_COLUMNS = ("theta_deg", "mean_loss")


def evaluate_physical_attack(
    model: Im2ImModel,
    data: PairedDataset,
    grid: TransformGrid,
    norm: str = "l1",
    metric: PerceptualMetric = DEFAULT_METRIC,
    max_tuples: int = DEFAULT_MAX_TUPLES,
):
    """Search every test input; returns (rows, results, loss-table rows, per-angle mean losses)."""
    results = [search_transform(model, p.input, p.target, grid, norm, max_tuples) for p in data]
    xs = data.inputs()
    attacked = [apply_similarity(p.input, r.best_params, fill=0.0) for p, r in zip(data, results)]
    clean_out = generate_batch(model, xs)
    pert_out = generate_batch(model, attacked)
    rows, table_rows = [], []
    for i, (pair, res) in enumerate(zip(data, results)):
        du, dv, rot, sx, sy = res.best_key
        rows.append(
            metric_row(
                i, "physical", "input", attacked[i], pair.input, pert_out[i], clean_out[i], pair.target,
                pair.seg_labels, data.palette, data.num_classes, metric,
                best_du=du, best_dv=dv, best_theta_deg=rot, best_sx=sx, best_sy=sy,
                best_loss=res.best_loss, identity_loss=res.identity_loss, loss_ratio=res.loss_ratio,
            )
        )
        for key, loss in res.loss_table.items():
            table_rows.append(dict(zip(LOSS_TABLE_COLUMNS, (i, *key, loss))))
    return rows, results, table_rows, per_angle_losses(results)


def per_angle_losses(results: list[PhysicalAttackResult]) -> list[dict]:
    """Mean loss per rotation angle over all images and remaining parameters."""
    acc: dict[float, list[float]] = {}
    for res in results:
        for key, loss in res.loss_table.items():
            acc.setdefault(key[2], []).append(loss)
    return [{"theta_deg": a, "mean_loss": float(np.mean(v))} for a, v in sorted(acc.items())]
