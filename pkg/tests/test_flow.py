import itertools

import numpy as np
import pytest
import torch

from im2im_adv.core import FlowBudget, ImageBuffer
from im2im_adv.errors import ConfigError, DimensionError, OptimizationDivergenceError
from im2im_adv.flow import (
    adversarial_term,
    evaluate_flow_attack,
    flow_attack_objective,
    optimize_flow,
    precomputed_target_attack,
)
from im2im_adv.geometry import FlowField, flow_tv_loss, image_to_tensor, warp_with_flow
from im2im_adv.models import DTYPE, untrained_im2im


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(0)
    model = untrained_im2im((8, 8, 3), seed=1, width=8)
    img = ImageBuffer(rng.uniform(0.1, 0.9, (8, 8, 3)))
    return model, img


def test_objective_zero_flow_is_zero(tiny):
    model, img = tiny
    for domain in ("input", "target"):
        assert flow_attack_objective(model, img, FlowField.zeros(8, 8), domain, 0.05) == 0.0


def test_objective_recomposes(tiny):
    model, img = tiny
    flow = FlowField.from_array(np.random.default_rng(1).normal(size=(8, 8, 2)))
    warped = image_to_tensor(warp_with_flow(img, flow), DTYPE)
    with torch.no_grad():
        adv = float(adversarial_term(model, image_to_tensor(img, DTYPE), warped, "input")[0])
    assert flow_attack_objective(model, img, flow, "input", 0.0) == pytest.approx(-adv, abs=1e-6)
    # smoothness = TV of the flow in [-1, 1] grid units, per pixel
    norm_flow = FlowField(flow.du * 2 / 7, flow.dv * 2 / 7)
    expected = -adv + flow_tv_loss(norm_flow) / 64
    assert flow_attack_objective(model, img, flow, "input", 1.0) == pytest.approx(expected, abs=1e-6)


def test_objective_rejects_bad_inputs(tiny):
    model, img = tiny
    with pytest.raises(DimensionError):
        flow_attack_objective(model, img, FlowField.zeros(4, 4), "input", 0.1)
    with pytest.raises(ConfigError):
        flow_attack_objective(model, img, FlowField.zeros(8, 8), "output", 0.1)


def test_zero_iterations_is_identity_attack(tiny):
    model, img = tiny
    res = optimize_flow(model, img, "input", FlowBudget(2.0, iters=0))
    assert not res.flow.du.any() and not res.flow.dv.any()
    assert res.perturbed == img


def test_result_invariants(tiny):
    model, img = tiny
    budget = FlowBudget(1.5, iters=15)
    res = optimize_flow(model, img, "input", budget, seed=3, keep_iterates=True)
    assert res.flow.magnitude().max() <= budget.xi_f + 1e-6
    assert res.perturbed == warp_with_flow(img, res.flow)
    assert len(res.objective_trace) == budget.iters + 1
    assert res.objective_trace[res.best_iteration] == min(res.objective_trace)
    for value, flow in zip(res.objective_trace, res.iterates):
        assert value == pytest.approx(flow_attack_objective(model, img, flow, "input", budget.lambda_flow), abs=1e-5)


def test_target_domain_runs_with_condition(tiny):
    model, img = tiny
    cond = ImageBuffer(np.full((8, 8, 3), 0.3))
    res = optimize_flow(model, img, "target", FlowBudget(1.0, iters=5), cond=cond)
    assert res.flow.magnitude().max() <= 1.0 + 1e-6


def test_one_dimensional_sanity_task():
    rng = np.random.default_rng(4)
    row = np.convolve(rng.random(40), np.ones(5) / 5, mode="valid")[:16]
    img = ImageBuffer(np.repeat(row[None, :, None], 3, axis=2))
    shifted = warp_with_flow(img, FlowField.constant(1, 16, 1.0, 0.0))
    ref = image_to_tensor(shifted, DTYPE)

    def loss(warped, flows):
        return torch.sqrt(((warped - ref) ** 2).flatten(1).sum(1))

    res = optimize_flow(None, img, "input", FlowBudget(1.0, iters=60), loss_fn=loss)
    learned = np.array([res.flow.du[0, 1:-1].mean(), res.flow.dv[0, 1:-1].mean()])

    grid = np.round(np.arange(-1.0, 1.0001, 0.05), 10)
    best, best_val = None, np.inf
    for du, dv in itertools.product(grid, grid):
        if du * du + dv * dv > 1.0 + 1e-12:
            continue
        val = np.linalg.norm(warp_with_flow(img, FlowField.constant(1, 16, du, dv)).values - shifted.values)
        if val < best_val:
            best, best_val = np.array([du, dv]), val
    assert np.abs(learned - best).max() <= 0.1
    assert np.abs(learned - [1.0, 0.0]).max() <= 0.1


def test_spsa_mode_respects_budget(tiny):
    model, img = tiny
    res = optimize_flow(model, img, "input", FlowBudget(1.0, iters=5), gradient="spsa")
    assert res.flow.magnitude().max() <= 1.0 + 1e-6
    with pytest.raises(ConfigError):
        optimize_flow(model, img, "input", FlowBudget(1.0, iters=1), gradient="newton")


def test_divergence_is_reported(tiny):
    _, img = tiny

    def bad(warped, flows):
        return warped.sum(dim=(1, 2, 3)) * float("nan")

    with pytest.raises(OptimizationDivergenceError):
        optimize_flow(None, img, "input", FlowBudget(1.0, iters=3), loss_fn=bad)


def test_vanishing_budget_changes_nothing(trained_model, split):
    _, test = split
    data = test.subset(range(4))
    rows, _ = evaluate_flow_attack(trained_model, data, FlowBudget(1e-6, iters=20), "input")
    assert max(r["PO_vs_O"] for r in rows) < 1e-3
    assert max(r["PI_vs_Iorig"] for r in rows) < 1e-3
    assert {"PO_vs_It", "PO_vs_O", "PI_vs_Iorig"} <= set(rows[0])


def test_flow_attack_lowers_segmentation_accuracy(trained_model, split):
    _, test = split
    rows, _ = evaluate_flow_attack(trained_model, test, FlowBudget(2.0), "input")
    zero = FlowBudget(2.0, iters=0)
    clean_rows, _ = evaluate_flow_attack(trained_model, test, zero, "input")
    assert np.mean([r["per_pixel_acc"] for r in rows]) < np.mean([r["per_pixel_acc"] for r in clean_rows])


def test_target_rows_use_attacked_model(trained_model, split):
    _, test = split
    data = test.subset(range(3))
    rows, res = evaluate_flow_attack(trained_model, data, FlowBudget(1.0, iters=3), "target", attacked_model=trained_model)
    assert all(r["PO_vs_O"] == 0.0 for r in rows)
    attack = precomputed_target_attack([r.perturbed for r in res])
    assert attack(1, data[1].input, data[1].target) == res[1].perturbed
