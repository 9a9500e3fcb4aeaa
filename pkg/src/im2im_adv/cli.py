"""Command-line entry point: ``im2im-adv``."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .core import FlowBudget, UniversalBudget, load_config_file
from .errors import Im2ImAdvError
from .harness import (
    DEFAULT_XI_F_GRID,
    DEFAULT_XI_GRID,
    SUMMARY_COLUMNS,
    ExperimentConfig,
    clean_model,
    default_suite,
    resolve_metric,
    run_experiment,
    run_sweep,
    split_dataset,
    summarize,
)
from .models import generate_batch, load_checkpoint, save_checkpoint, train_classifier
from .physical import TransformGrid
from .plotting import emit_figures, emit_sweep_figures
from .report import AttackReport, aggregate, metric_row, read_csv_rows, rows_to_csv


class Context:
    def __init__(self, config_path, seed, out):
        self.raw = load_config_file(config_path) if config_path else {}
        self.seed = seed
        self.out = out

    def config(self, **overrides) -> ExperimentConfig:
        raw = dict(self.raw)
        raw.pop("sweep", None)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        cfg = ExperimentConfig.from_mapping(raw)
        if self.seed is not None:
            cfg = cfg.with_seed(self.seed)
        if self.out is not None:
            cfg = replace(cfg, out=self.out)
        return cfg


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML or JSON experiment config.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed (training and attacks).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, out):
    """Adversarial attacks on toy image-to-image translation models."""
    try:
        ctx.obj = Context(config_path, seed, out)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)


@main.command("train-toy")
@click.option("--epochs", type=int, default=None)
@click.option("--task", type=click.Choice(["paired", "texture"]), default=None)
@click.pass_obj
def train_toy(obj: Context, epochs, task):
    """Train the toy generator/discriminator and classifier; write checkpoints under OUT."""
    try:
        cfg = obj.config()
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
        if task is not None:
            cfg = replace(cfg, dataset=replace(cfg.dataset, kind=task))
        train_set, test_set = split_dataset(cfg)
        model = clean_model(replace(cfg, cache=False), train_set)
        clf = train_classifier(train_set, cfg.train)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)
    out = Path(cfg.out)
    save_checkpoint(model, out / "model")
    save_checkpoint(clf, out / "classifier")
    l1 = model.training_meta.get("l1_history") or [float("nan")]
    click.echo(json.dumps({
        "model": str(out / "model"),
        "classifier": str(out / "classifier"),
        "final_l1": l1[-1],
        "classifier_train_accuracy": clf.meta["train_accuracy"],
    }, sort_keys=True))


def _finish(report: AttackReport, figures: bool):
    if figures:
        emit_figures(report)
    click.echo(report.csv_text(), nl=False)


@main.group()
def attack():
    """Run one attack on the test split and write CSV/JSON reports and figures."""


_common = [
    click.option("--name", default=None),
    click.option("--figures/--no-figures", default=True),
]


def _with_common(f):
    for deco in reversed(_common):
        f = deco(f)
    return f


@attack.command("universal")
@click.option("--domain", type=click.Choice(["input", "target"]), default=None)
@click.option("--timing", type=click.Choice(["inference", "training"]), default=None)
@click.option("--xi", type=float, default=None, help="Radius in 8-bit pixel units.")
@click.option("--p", "p", default=None, help="2 or inf.")
@click.option("--delta", type=float, default=None)
@click.option("--max-passes", type=int, default=None)
@_with_common
@click.pass_obj
def attack_universal(obj: Context, domain, timing, xi, p, delta, max_passes, name, figures):
    try:
        cfg = obj.config(attack="universal", domain=domain, timing=timing, name=name or obj.raw.get("name") or "universal")
        u = cfg.universal
        cfg = replace(cfg, universal=UniversalBudget(
            xi if xi is not None else u.xi,
            p if p is not None else u.p,
            delta if delta is not None else u.delta,
            max_passes if max_passes is not None else u.max_passes,
        ))
        _finish(run_experiment(cfg), figures)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)


@attack.command("flow")
@click.option("--domain", type=click.Choice(["input", "target"]), default=None)
@click.option("--timing", type=click.Choice(["inference", "training"]), default=None)
@click.option("--xi-f", type=float, default=None, help="Per-pixel flow bound in pixels.")
@click.option("--lambda", "lambda_flow", type=float, default=None, help="Flow smoothness weight.")
@click.option("--iters", type=int, default=None)
@_with_common
@click.pass_obj
def attack_flow(obj: Context, domain, timing, xi_f, lambda_flow, iters, name, figures):
    try:
        cfg = obj.config(attack="flow", domain=domain, timing=timing, name=name or obj.raw.get("name") or "flow")
        f = cfg.flow
        cfg = replace(cfg, flow=FlowBudget(
            xi_f if xi_f is not None else f.xi_f,
            lambda_flow if lambda_flow is not None else f.lambda_flow,
            iters if iters is not None else f.iters,
        ))
        _finish(run_experiment(cfg), figures)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)


@attack.command("physical")
@click.option("--grid-file", type=click.Path(exists=True, dir_okay=False), default=None, help="TOML/JSON transform grid.")
@click.option("--norm", type=click.Choice(["l1", "l2"]), default=None)
@_with_common
@click.pass_obj
def attack_physical(obj: Context, grid_file, norm, name, figures):
    try:
        cfg = obj.config(attack="physical", domain="input", timing="inference", norm=norm,
                         name=name or obj.raw.get("name") or "physical")
        if grid_file:
            cfg = replace(cfg, grid=TransformGrid.from_mapping(load_config_file(grid_file)))
        _finish(run_experiment(cfg), figures)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), default=None,
              help="Model directory written by train-toy; trains (or loads the cached model) when omitted.")
@click.pass_obj
def evaluate(obj: Context, checkpoint):
    """Score clean outputs on the test split (no attack)."""
    try:
        cfg = obj.config()
        train_set, test_set = split_dataset(cfg)
        model = load_checkpoint(checkpoint) if checkpoint else clean_model(cfg, train_set)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)
    metric = resolve_metric(cfg.metrics[0])
    outs = generate_batch(model, test_set.inputs())
    rows = [
        metric_row(i, "none", "input", p.input, p.input, o, o, p.target, p.seg_labels, test_set.palette, test_set.num_classes, metric)
        for i, (p, o) in enumerate(zip(test_set, outs))
    ]
    echo = cfg.as_dict()
    echo["name"] = "evaluate"
    report = AttackReport(echo, rows)
    report.write(Path(cfg.out))
    click.echo(report.csv_text(), nl=False)


@main.command()
@click.argument("report_path", type=click.Path(exists=True))
@click.option("--figures/--no-figures", default=True)
def report(report_path, figures):
    """Re-aggregate a written report (its CSV, JSON or run directory) and re-render its figures."""
    path = Path(report_path)
    if path.is_dir():
        candidates = sorted(path.glob("*.json"))
        if not candidates:
            _fail(FileNotFoundError(f"no report JSON in {path}"))
        path = candidates[0]
    json_path = path.with_suffix(".json")
    csv_path = path.with_suffix(".csv")
    meta = json.loads(json_path.read_text())
    rows = read_csv_rows(csv_path)
    rep = AttackReport(meta["config"], rows, artifacts=meta.get("artifacts", {}))
    if figures and "image_dir" in rep.artifacts:
        rep.artifacts["panels"] = meta["artifacts"].get("panels", [])
        try:
            emit_figures(rep)
        except FileNotFoundError as exc:
            _fail(exc)
    click.echo("metric,mean,std,n")
    for col, agg in aggregate(rows).items():
        click.echo(f"{col},{agg['mean']:.6f},{agg['std']:.6f},{agg['n']}")


@main.command()
@click.option("--figures/--no-figures", default=True)
@click.pass_obj
def sweep(obj: Context, figures):
    """Default suite: universal over the xi grid, flow over the xi_f grid, and the physical grid.

    A ``[sweep]`` table in the config may override ``xi`` and ``xi_f`` lists.
    """
    try:
        base = obj.config()
        grid = obj.raw.get("sweep", {})
        configs = default_suite(base.seed, base.out, base, grid.get("xi", DEFAULT_XI_GRID), grid.get("xi_f", DEFAULT_XI_F_GRID))
        reports, _ = run_sweep(configs, base.out)
    except (Im2ImAdvError, ValueError) as exc:
        _fail(exc)
    if figures:
        for rep in reports:
            emit_figures(rep)
        emit_sweep_figures(summarize(reports), Path(base.out) / "figures")
    click.echo(rows_to_csv(summarize(reports), SUMMARY_COLUMNS), nl=False)


if __name__ == "__main__":
    main()
