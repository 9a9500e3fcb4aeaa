"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary, then asserts.  Criteria 5, 6 and 10 share one run of the
default suite.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from im2im_adv.core import DatasetSpec, FlowBudget, ImageBuffer, Perturbation, UniversalBudget, lp_norm, make_synthetic_dataset
from im2im_adv.flow import optimize_flow_batch, precomputed_target_attack
from im2im_adv.geometry import (
    FlowField,
    SimilarityParams,
    apply_similarity,
    bilinear_sample,
    flow_tv_gradient,
    flow_tv_loss,
    warp_flow_gradient,
    warp_with_flow,
)
from im2im_adv.harness import ExperimentConfig, clean_model, default_suite, run_experiment, run_sweep, split_dataset
from im2im_adv.metrics import label_outputs, seg_scores
from im2im_adv.models import TrainConfig, generate, generate_batch, train_classifier, train_im2im
from im2im_adv.physical import TransformGrid, default_grid, evaluate_physical_attack, search_transform
from im2im_adv.universal import compute_universal_perturbation, project_lp

from test_flow import test_one_dimensional_sanity_task as one_dimensional_sanity


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def direct_bilinear(values, u, v):
    h, w = values.shape
    vv, uu = np.mgrid[0:h, 0:w]
    return float((values * np.maximum(0, 1 - np.abs(u - uu)) * np.maximum(0, 1 - np.abs(v - vv))).sum())


def test_criterion_1_geometry_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(200):
        h, w = (int(k) for k in rng.integers(2, 12, 2))
        img = ImageBuffer(rng.random((h, w, 3)))
        u, v, c = rng.uniform(0, w - 1), rng.uniform(0, h - 1), int(rng.integers(3))
        worst = max(worst, abs(bilinear_sample(img, u, v, c) - direct_bilinear(img.values[:, :, c], u, v)))
    img = ImageBuffer(rng.random((9, 7, 3)))
    identity = np.array_equal(warp_with_flow(img, FlowField.zeros(9, 7)).values, img.values)
    du, dv = np.zeros((3, 3)), np.zeros((3, 3))
    du[1, 1], dv[1, 1] = 3.0, 4.0
    tv = (flow_tv_loss(FlowField(np.array([[0.0, 1.0]]), np.zeros((1, 2)))), flow_tv_loss(FlowField(du, dv)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and identity and tv == (2.0, 40.0) and elapsed < 5.0
    record(1, ok, f"max bilinear err {worst:.1e}, zero-flow identity {identity}, TV {tv}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_gradient_checks():
    rng = np.random.default_rng(101)
    h_fd = 1e-3
    worst = 0.0
    img = ImageBuffer(rng.uniform(0.1, 0.9, (8, 8, 3)))
    weights = rng.random((8, 8, 3))
    for _ in range(50):
        # fractional parts stay at least 0.1 from an integer, so +-h never crosses a kink
        arr = rng.uniform(0.1, 0.9, (8, 8, 2)) * rng.choice([-1, 1], (8, 8, 2))
        v, u, k = int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(2))
        g = warp_flow_gradient(img, FlowField.from_array(arr), weights)[v, u, k]

        def warp_f(x):
            a = arr.copy()
            a[v, u, k] = x
            return float((warp_with_flow(img, FlowField.from_array(a)).values * weights).sum())

        fd = (warp_f(arr[v, u, k] + h_fd) - warp_f(arr[v, u, k] - h_fd)) / (2 * h_fd)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-8))

        tv_arr = rng.normal(size=(6, 6, 2))
        tv_g = flow_tv_gradient(FlowField.from_array(tv_arr))[v % 6, u % 6, k]

        def tv_f(x):
            a = tv_arr.copy()
            a[v % 6, u % 6, k] = x
            return flow_tv_loss(FlowField.from_array(a))

        x0 = tv_arr[v % 6, u % 6, k]
        fd = (tv_f(x0 + h_fd) - tv_f(x0 - h_fd)) / (2 * h_fd)
        worst = max(worst, abs(tv_g - fd) / max(abs(fd), 1e-8))
    ok = worst <= 1e-3
    record(2, ok, f"max relative gradient error {worst:.1e} over 50 warp + 50 TV probes")
    assert ok


def test_criterion_3_projection():
    rng = np.random.default_rng(102)
    worst_norm = worst_idem = worst_radial = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)), 3)
        d = rng.normal(scale=float(rng.choice([0.01, 1.0, 50.0])), size=shape)
        xi = float(rng.uniform(0.01, 5.0))
        for p in (2, math.inf):
            q = project_lp(Perturbation(d), xi, p)
            worst_norm = max(worst_norm, lp_norm(q.delta, p) - xi)
            worst_idem = max(worst_idem, float(np.abs(project_lp(q, xi, p).delta - q.delta).max()))
        n2 = float(np.sqrt((d * d).sum()))
        radial = d if n2 <= xi else d * (xi / n2)
        worst_radial = max(worst_radial, float(np.abs(project_lp(Perturbation(d), xi, 2).delta - radial).max()))
    ok = worst_norm <= 1e-6 and worst_idem <= 1e-12 and worst_radial <= 1e-9
    record(3, ok, f"norm excess {worst_norm:.1e}, idempotence err {worst_idem:.1e}, radial err {worst_radial:.1e}")
    assert ok


def test_criterion_4_universal_attack():
    data = make_synthetic_dataset(DatasetSpec(n=96, classes=8, seed=0))
    train, _ = data.split(32)
    assert len(train) == 64
    clf = train_classifier(train, TrainConfig(epochs=40, seed=0))
    acc = clf.meta["train_accuracy"]
    t0 = time.perf_counter()
    big = compute_universal_perturbation(clf, train, "input", UniversalBudget(2000.0, math.inf, 0.2), seed=0)
    elapsed = time.perf_counter() - t0
    small = compute_universal_perturbation(clf, train, "input", UniversalBudget(10.0, math.inf, 0.2), seed=0)
    ok = acc >= 0.95 and big.achieved_fooling_rate >= 0.8 and elapsed < 120 and small.achieved_fooling_rate <= big.achieved_fooling_rate
    record(4, ok, f"train acc {acc:.3f}, fooling {big.achieved_fooling_rate:.3f} at xi=2000 in {elapsed:.1f}s, "
                  f"{small.achieved_fooling_rate:.3f} at xi=10")
    assert ok


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    t0 = time.perf_counter()
    reports, _ = run_sweep(default_suite(seed=0, out=out), out)
    elapsed = time.perf_counter() - t0
    return {r.name: r for r in reports}, elapsed, out


def _col(report, key):
    return np.array([r[key] for r in report.rows])


def test_criterion_5_flow_trend(suite):
    reports, _, _ = suite
    flows = [reports[f"flow-xif{x}"] for x in (1, 2, 3, 4)]
    pi = [float(_col(r, "PI_vs_Iorig").mean()) for r in flows]
    increasing = all(b > a for a, b in zip(pi, pi[1:]))
    above = np.all(np.stack([_col(r, "PO_vs_O") > _col(r, "PI_vs_Iorig") for r in flows]), axis=0)
    frac = float(above.mean())
    try:
        one_dimensional_sanity()
        sanity = True
    except AssertionError:
        sanity = False
    ok = increasing and frac >= 0.9 and sanity
    record(5, ok, f"mean PI by xi_f {[round(p, 4) for p in pi]} (strictly increasing: {increasing}), "
                  f"PO>PI at every xi_f for {frac:.2f} of images, 1-D sanity {sanity}")
    assert ok


def test_criterion_6_segmentation_degradation(suite):
    reports, _, out = suite
    cfg = ExperimentConfig(out=str(out))
    train, test = split_dataset(cfg)
    model = clean_model(cfg, train)
    clean = np.mean([
        seg_scores(label_outputs(o, test.palette), p.seg_labels, test.num_classes).per_pixel_acc
        for o, p in zip(generate_batch(model, test.inputs()), test)
    ])
    attacked = [float(_col(reports[f"flow-xif{x}"], "per_pixel_acc").mean()) for x in (1, 2, 3, 4)]
    gap = clean - attacked[-1]
    ok = all(a < clean for a in attacked) and gap >= 0.1
    record(6, ok, f"clean acc {clean:.3f}, attacked by xi_f {[round(a, 3) for a in attacked]}, gap at xi_f=4 {gap:.3f}")
    assert ok


def test_criterion_7_physical_attack(trained_model, split):
    _, test = split
    grid = default_grid(test[0].input.width)
    t0 = time.perf_counter()
    _, results, _, _ = evaluate_physical_attack(trained_model, test, grid)
    elapsed = time.perf_counter() - t0
    ge = all(r.best_loss >= r.identity_loss for r in results)
    gt = float(np.mean([r.best_loss > r.identity_loss for r in results]))
    pair = test[0]
    three = TransformGrid(rotations=(0.0, 2.0), scales_x=(0.9,), scales_y=(0.9,), isotropic=True)
    res = search_transform(trained_model, pair.input, pair.target, three)
    exact = len(res.loss_table) == 3
    for key, loss in res.loss_table.items():
        p = SimilarityParams(key[0], key[1], math.radians(key[2]), key[3], key[4])
        out = generate(trained_model, apply_similarity(pair.input, p)).values
        exact &= float(np.mean(np.abs(out - pair.target.values))) == loss
    ok = ge and gt >= 0.9 and exact and elapsed < 120 and len(test) == 32
    record(7, ok, f"best>=identity for all {ge}, strictly greater for {gt:.2f}, 3-point grid bit-exact {exact}, "
                  f"{grid.size()} tuples x {len(test)} images in {elapsed:.1f}s")
    assert ok


def test_criterion_8_training_time_target_attack(trained_model, split):
    train, test = split
    cfg = TrainConfig(epochs=40, seed=0)
    flows = []
    for s in range(0, len(train), 32):
        sl = slice(s, s + 32)
        flows += optimize_flow_batch(trained_model, train.targets()[sl], "target", FlowBudget(2.0), 0, train.inputs()[sl])
    attacked = train_im2im(train, cfg, precomputed_target_attack([r.perturbed for r in flows]), {"kind": "flow", "xi_f": 2.0})

    def err(m):
        return float(np.mean([np.abs(o.values - p.target.values).mean() for o, p in zip(generate_batch(m, test.inputs()), test)]))

    e_clean, e_att = err(trained_model), err(attacked)
    zero = [warp_with_flow(y, FlowField.zeros(y.height, y.width)) for y in train.targets()]
    null = train_im2im(train, cfg, precomputed_target_attack(zero), {"kind": "flow", "xi_f": 0.0})
    same = null.training_meta["l1_history"] == trained_model.training_meta["l1_history"] and all(
        torch.equal(a, b) for a, b in zip(null.generator.state_dict().values(), trained_model.generator.state_dict().values())
    ) and all(
        torch.equal(a, b) for a, b in zip(null.discriminator.state_dict().values(), trained_model.discriminator.state_dict().values())
    )
    ok = e_att > e_clean and same
    record(8, ok, f"clean-input |G(x)-y| {e_clean:.4f} clean-trained vs {e_att:.4f} attack-trained, "
                  f"zero attack bit-exact {same}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    small = dict(n_test=8, dataset=DatasetSpec(n=24, height=16, width=16, classes=3, seed=2), train=TrainConfig(epochs=3, width=8))
    configs = [
        ExperimentConfig(name="u", attack="universal", universal=UniversalBudget(500.0, max_passes=1), **small),
        ExperimentConfig(name="f", attack="flow", flow=FlowBudget(2.0, iters=20), **small),
        ExperimentConfig(name="ft", attack="flow", domain="target", timing="training", flow=FlowBudget(1.0, iters=5), **small),
        ExperimentConfig(name="p", attack="physical", **small),
    ]
    identical = True
    for cfg in configs:
        texts = []
        for run in ("a", "b"):
            run_experiment(replace(cfg, out=str(tmp_path / run)))
            texts.append((tmp_path / run / cfg.name / f"{cfg.name}.csv").read_bytes())
        identical &= texts[0] == texts[1]
    record(9, identical, f"byte-identical CSV across two runs for {len(configs)} fixture configs: {identical}")
    assert identical


def test_criterion_10_default_suite_runtime(suite):
    reports, elapsed, _ = suite
    ok = elapsed <= 600 and len(reports) == 10 and all(len(r.rows) == 32 for r in reports.values())
    record(10, ok, f"default suite ({len(reports)} runs, 32 test images at 32x32) in {elapsed:.0f}s on {torch.get_num_threads()} thread(s)")
    assert ok
