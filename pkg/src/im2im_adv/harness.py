"""Experiment configs and the train -> attack -> evaluate pipeline."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DatasetSpec, FlowBudget, ImageBuffer, PairedDataset, UniversalBudget, make_synthetic_dataset, save_array
from .errors import ConfigError
from .flow import evaluate_flow_attack, optimize_flow_batch, precomputed_target_attack
from .geometry import apply_similarity, flow_to_rgb
from .metrics import DEFAULT_METRIC, PerceptualMetric, l1_metric
from .models import Im2ImModel, TrainConfig, generate_batch, load_checkpoint, save_checkpoint, train_classifier, train_cycle, train_im2im
from .physical import ANGLE_COLUMNS, LOSS_TABLE_COLUMNS, TransformGrid, default_grid, evaluate_physical_attack
from .report import CSV_COLUMNS, AttackReport, metric_row, rows_to_csv
from .universal import compute_universal_perturbation, evaluate_universal_attack, fooling_rate

ATTACKS = ("universal", "flow", "physical")
DOMAINS = ("input", "target")
TIMINGS = ("inference", "training")
PANELS = ("perturbed_input", "attacked_output", "clean_output", "perturbation")

METRICS = {
    DEFAULT_METRIC.name: DEFAULT_METRIC,
    "l1": l1_metric(),
}

DEFAULT_XI_GRID = (10.0, 200.0, 500.0, 1000.0, 2000.0)
DEFAULT_XI_F_GRID = (1.0, 2.0, 3.0, 4.0)


def resolve_metric(name: str) -> PerceptualMetric:
    try:
        return METRICS[name]
    except KeyError:
        raise ConfigError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None


def check_attack_surface(attack: str, domain: str, timing: str) -> None:
    """Reject combinations outside the attack-surface matrix."""
    if attack not in ATTACKS:
        raise ConfigError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if timing not in TIMINGS:
        raise ConfigError(f"unknown timing {timing!r}; expected one of {TIMINGS}")
    if timing == "training" and domain != "target":
        raise ConfigError(
            "rule violated: timing=training requires domain=target "
            "(training-time attacks perturb the targets the model learns from; inputs stay clean)"
        )
    if attack == "physical" and domain != "input":
        raise ConfigError(
            "rule violated: the physical attack requires domain=input "
            "(similarity transforms are only applied to the input domain X)"
        )


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    attack: str = "flow"
    domain: str = "input"
    timing: str = "inference"
    seed: int = 0
    out: str = "runs"
    n_test: int = 32
    metrics: tuple = (DEFAULT_METRIC.name,)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    universal: UniversalBudget = field(default_factory=lambda: UniversalBudget(2000.0))
    flow: FlowBudget = field(default_factory=lambda: FlowBudget(2.0))
    grid: TransformGrid | None = None
    norm: str = "l1"
    cache: bool = True

    def __post_init__(self):
        check_attack_surface(self.attack, self.domain, self.timing)
        self.metrics = tuple(self.metrics)
        if not self.metrics:
            raise ConfigError("at least one metric is required")
        for m in self.metrics:
            resolve_metric(m)
        if not 1 <= self.n_test < self.dataset.n:
            raise ConfigError("n_test must leave at least one training pair")
        if self.norm not in ("l1", "l2"):
            raise ConfigError(f"norm must be l1 or l2, got {self.norm!r}")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "ExperimentConfig":
        cfg = dict(cfg)
        kw = {}
        for key in ("name", "attack", "domain", "timing", "seed", "out", "n_test", "norm", "cache"):
            if key in cfg:
                kw[key] = cfg.pop(key)
        if "metrics" in cfg:
            kw["metrics"] = tuple(cfg.pop("metrics"))
        if "dataset" in cfg:
            kw["dataset"] = DatasetSpec.from_mapping(cfg.pop("dataset"))
        if "train" in cfg:
            kw["train"] = TrainConfig.from_mapping(cfg.pop("train"))
        if "universal" in cfg:
            kw["universal"] = UniversalBudget(**cfg.pop("universal"))
        if "flow" in cfg:
            kw["flow"] = FlowBudget(**cfg.pop("flow"))
        if "grid" in cfg:
            kw["grid"] = TransformGrid.from_mapping(cfg.pop("grid"))
        cfg.pop("sweep", None)
        if cfg:
            raise ConfigError(f"unknown config keys: {sorted(cfg)}")
        return cls(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), train=replace(self.train, seed=int(seed)))

    def budget(self) -> dict:
        if self.attack == "universal":
            b = self.universal
            return {"xi": b.xi, "p": "inf" if b.p == float("inf") else b.p, "delta": b.delta, "max_passes": b.max_passes}
        if self.attack == "flow":
            b = self.flow
            return {"xi_f": b.xi_f, "lambda_flow": b.lambda_flow, "iters": b.iters}
        return {"grid": self.resolved_grid().as_dict(), "norm": self.norm}

    def resolved_grid(self) -> TransformGrid:
        return self.grid if self.grid is not None else default_grid(self.dataset.width)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "attack": self.attack,
            "domain": self.domain,
            "timing": self.timing,
            "seed": self.seed,
            "n_test": self.n_test,
            "metrics": list(self.metrics),
            "dataset": self.dataset.as_dict(),
            "train": self.train.as_dict(),
            "budget": self.budget(),
        }


# ---------------------------------------------------------------------------
# model cache


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _train_model(train_set: PairedDataset, config: TrainConfig, kind: str, target_attack=None, attack_spec=None) -> Im2ImModel:
    trainer = train_im2im if kind == "paired" else train_cycle
    return trainer(train_set, config, target_attack=target_attack, attack_spec=attack_spec)


def clean_model(cfg: ExperimentConfig, train_set: PairedDataset) -> Im2ImModel:
    """Train the clean model, or load it from the cache under ``<out>/cache``.

    Checkpoints are float32, exactly the training precision, so a cached
    model behaves identically to a freshly trained one.
    """
    key = _digest({"dataset": cfg.dataset.as_dict(), "n_test": cfg.n_test, "train": cfg.train.as_dict()})
    path = Path(cfg.out) / "cache" / f"model-{key}"
    if cfg.cache and (path / "manifest.json").exists():
        return load_checkpoint(path)
    model = _train_model(train_set, cfg.train, cfg.dataset.kind)
    if cfg.cache:
        save_checkpoint(model, path)
    return model


def split_dataset(cfg: ExperimentConfig) -> tuple[PairedDataset, PairedDataset]:
    return make_synthetic_dataset(cfg.dataset).split(cfg.n_test)


# ---------------------------------------------------------------------------
# experiment


def _rescale(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def _store_panels(directory: Path, rows, perturbed, attacked, clean, visuals) -> None:
    for r, imgs in zip(rows, zip(perturbed, attacked, clean, visuals)):
        for panel, img in zip(PANELS, imgs):
            values = img.values if isinstance(img, ImageBuffer) else img
            save_array(directory / f"{r['image_id']:03d}_{panel}.f32", values, {"panel": panel})


def run_experiment(cfg: ExperimentConfig, model: Im2ImModel | None = None) -> AttackReport:
    """Run one configured attack on every test image and write CSV, JSON and image containers."""
    t0 = time.perf_counter()
    train_set, test_set = split_dataset(cfg)
    if model is None:
        model = clean_model(cfg, train_set)
    timings = {"model": time.perf_counter() - t0}
    metric = resolve_metric(cfg.metrics[0])
    run_dir = Path(cfg.out) / cfg.name
    img_dir = run_dir / "images"
    extra_tables: dict = {}
    info: dict = {}
    domain = cfg.domain
    t1 = time.perf_counter()

    attacked_model = None
    if cfg.attack == "universal":
        clf = train_classifier(train_set, cfg.train, domain=domain)
        result = compute_universal_perturbation(clf, train_set, domain, cfg.universal, seed=cfg.seed)
        info.update(
            classifier_train_accuracy=clf.meta["train_accuracy"],
            fooling_rate_train=result.achieved_fooling_rate,
            fooling_rate_test=fooling_rate(clf, test_set, result.pert, domain),
            passes_used=result.passes_used,
        )
        if cfg.timing == "training":
            perturbed_targets = [ImageBuffer(np.clip(y.values + result.pert.delta, 0, 1)) for y in train_set.targets()]
            attacked_model = _train_model(
                train_set, cfg.train, cfg.dataset.kind, precomputed_target_attack(perturbed_targets), cfg.as_dict()["budget"]
            )
        rows = evaluate_universal_attack(model, test_set, result, domain, attacked_model, metric)
        save_array(run_dir / "perturbation.f32", result.pert.delta, {"xi": cfg.universal.xi})
        perturbed = [ImageBuffer(np.clip(im.values + result.pert.delta, 0, 1)) for im in test_set.images(domain)]
        visuals = [_rescale(result.pert.delta)] * len(rows)
    elif cfg.attack == "flow":
        if cfg.timing == "training":
            train_flows = []
            for s in range(0, len(train_set), 32):
                sl = slice(s, s + 32)
                train_flows += optimize_flow_batch(model, train_set.targets()[sl], "target", cfg.flow, cfg.seed, train_set.inputs()[sl])
            attacked_model = _train_model(
                train_set, cfg.train, cfg.dataset.kind,
                precomputed_target_attack([r.perturbed for r in train_flows]), cfg.as_dict()["budget"],
            )
        rows, results = evaluate_flow_attack(model, test_set, cfg.flow, domain, cfg.seed, attacked_model, metric)
        flows = np.stack([r.flow.to_array() for r in results])
        save_array(run_dir / "flows.f32", flows, {"xi_f": cfg.flow.xi_f})
        perturbed = [r.perturbed for r in results]
        visuals = [flow_to_rgb(r.flow, cfg.flow.xi_f) for r in results]
    else:
        rows, results, table, angles = evaluate_physical_attack(model, test_set, cfg.resolved_grid(), cfg.norm, metric)
        extra_tables["loss_table"] = (LOSS_TABLE_COLUMNS, table)
        extra_tables["per_angle"] = (ANGLE_COLUMNS, angles)
        perturbed = [apply_similarity(p.input, r.best_params, fill=0.0) for p, r in zip(test_set, results)]
        visuals = [_rescale(np.abs(a.values - p.input.values)) for a, p in zip(perturbed, test_set)]
    timings["attack"] = time.perf_counter() - t1

    clean_out = generate_batch(model, test_set.inputs())
    if domain == "input":
        attacked_out = generate_batch(model, perturbed)
    else:
        attacked_out = generate_batch(attacked_model or model, test_set.inputs())
    _store_panels(img_dir, rows, perturbed, attacked_out, clean_out, visuals)

    for name in cfg.metrics[1:]:
        m = resolve_metric(name)
        extra_rows = [
            metric_row(r["image_id"], cfg.attack, domain, pi, orig, po, o, pair.target, metric=m)
            for r, pi, orig, po, o, pair in zip(rows, perturbed, test_set.images(domain), attacked_out, clean_out, test_set)
        ]
        extra_tables[f"metric_{name}"] = (CSV_COLUMNS, extra_rows)

    config_echo = cfg.as_dict()
    config_echo.update(info)
    report = AttackReport(
        config_echo,
        rows,
        artifacts={"image_dir": img_dir, "panels": list(PANELS)},
        timings=timings,
        extra_tables=extra_tables,
    )
    report.write(run_dir)
    return report


def default_suite(
    seed: int = 0,
    out: str = "runs",
    base: ExperimentConfig | None = None,
    xis=DEFAULT_XI_GRID,
    xi_fs=DEFAULT_XI_F_GRID,
) -> list[ExperimentConfig]:
    """Universal over the xi grid, flow over the xi_f grid, and the physical grid, all on the input domain."""
    base = base or ExperimentConfig()
    base = replace(base.with_seed(seed), out=str(out), domain="input", timing="inference")
    configs = [
        replace(base, name=f"universal-xi{float(xi):g}", attack="universal", universal=replace(base.universal, xi=float(xi)))
        for xi in xis
    ]
    configs += [
        replace(base, name=f"flow-xif{float(xf):g}", attack="flow", flow=replace(base.flow, xi_f=float(xf)))
        for xf in xi_fs
    ]
    configs.append(replace(base, name="physical", attack="physical"))
    return configs


SUMMARY_COLUMNS = ("name", "attack", "budget", "PO_vs_O", "PO_vs_It", "PI_vs_Iorig", "psnr", "per_pixel_acc", "per_class_acc", "class_iou")


def summarize(reports: list[AttackReport]) -> list[dict]:
    """One row per report with the aggregate means and the swept budget value."""
    out = []
    for rep in reports:
        b = rep.config["budget"]
        budget = b.get("xi", b.get("xi_f", float("nan")))
        row = {"name": rep.name, "attack": rep.config["attack"], "budget": float(budget)}
        for col in SUMMARY_COLUMNS[3:]:
            row[col] = rep.aggregates.get(col, {}).get("mean", float("nan"))
        out.append(row)
    return out


def run_sweep(configs: list[ExperimentConfig], out: str | Path) -> tuple[list[AttackReport], Path]:
    """Run configs in order (sharing one clean model per dataset/training setup); writes ``summary.csv``."""
    reports = [run_experiment(c) for c in configs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.csv"
    path.write_text(rows_to_csv(summarize(reports), SUMMARY_COLUMNS))
    return reports, path
