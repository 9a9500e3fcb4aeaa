"""Flow-based spatial attack: optimise a bounded, smooth backward flow field."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .core import FlowBudget, ImageBuffer, PairedDataset
from .errors import ConfigError, DimensionError, OptimizationDivergenceError
from .geometry import FlowField, flow_tv_tensor, image_to_tensor, project_flow_tensor, warp_tensor, warp_with_flow
from .metrics import DEFAULT_METRIC, PerceptualMetric
from .models import DTYPE, Im2ImModel, generate_batch, stack_images
from .report import metric_row

DOMAINS = ("input", "target")


@dataclass(eq=False)
class FlowAttackResult:
    flow: FlowField
    perturbed: ImageBuffer
    objective_trace: list[float]
    budget: FlowBudget
    best_iteration: int = 0
    iterates: list | None = field(default=None, repr=False)


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}")


def _score_map_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # l2 distance between patch score maps; zero-safe so the gradient stays finite at a == b
    sq = ((a - b) ** 2).flatten(1).sum(dim=1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


class _DiscriminatorShift:
    """Per-sample change of the discriminator's patch scores caused by a warp.

    input: D(x, G(warped x)) against D(x, G(x)).  target: D(x, warped y) against D(x, y).
    The discriminator is always conditioned on the clean input; the clean
    score maps are computed once.
    """

    def __init__(self, model: Im2ImModel, images: torch.Tensor, domain: str, conds: torch.Tensor | None = None):
        self.model = model
        self.domain = domain
        self.cond = conds if conds is not None else images
        with torch.no_grad():
            clean_y = model.g(images) if domain == "input" else images
            self.clean = model.d_score_map(self.cond, clean_y)

    def __call__(self, warped: torch.Tensor) -> torch.Tensor:
        y = self.model.g(warped) if self.domain == "input" else warped
        return _score_map_distance(self.model.d_score_map(self.cond, y), self.clean)


def adversarial_term(model: Im2ImModel, images: torch.Tensor, warped: torch.Tensor, domain: str, conds: torch.Tensor | None = None) -> torch.Tensor:
    return _DiscriminatorShift(model, images, domain, conds)(warped)


def smoothness_term(flows: torch.Tensor) -> torch.Tensor:
    """Flow TV loss per pixel, with the flow in normalised [-1, 1] grid coordinates."""
    h, w = flows.shape[2:]
    scale = torch.tensor([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)], dtype=flows.dtype).view(1, 2, 1, 1)
    return flow_tv_tensor(flows * scale) / (h * w)


def _objective_batch(model, images, flows, domain, lambda_flow, conds):
    warped = warp_tensor(images, flows)
    adv = adversarial_term(model, images, warped, domain, conds)
    return -adv + lambda_flow * smoothness_term(flows)


def flow_attack_objective(model: Im2ImModel, I: ImageBuffer, flow: FlowField, domain: str, lambda_flow: float, cond: ImageBuffer | None = None) -> float:
    """``-adv(warp(I, flow)) + lambda * smoothness(flow)``; lower means a stronger, smoother attack.

    ``cond`` is the clean generator input paired with ``I`` when attacking the
    target domain of a conditional model.
    """
    _check_domain(domain)
    if I.shape[:2] != flow.shape:
        raise DimensionError(f"image {I.shape} vs flow {flow.shape}")
    if tuple(I.shape) != tuple(model.image_shape):
        raise DimensionError(f"model expects {model.image_shape}, got {I.shape}")
    imgs = image_to_tensor(I, DTYPE)
    flows = torch.from_numpy(np.stack([flow.du, flow.dv]))[None].to(DTYPE)
    conds = image_to_tensor(cond, DTYPE) if cond is not None else None
    with torch.no_grad():
        return float(_objective_batch(model, imgs, flows, domain, lambda_flow, conds)[0])


LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def optimize_flow_batch(
    model: Im2ImModel | None,
    images: list[ImageBuffer],
    domain: str,
    budget: FlowBudget,
    seed: int = 0,
    conds: list[ImageBuffer] | None = None,
    loss_fn: LossFn | None = None,
    gradient: str = "autograd",
    spsa_samples: int = 4,
    keep_iterates: bool = False,
) -> list[FlowAttackResult]:
    """Sign-gradient descent on the flow objective, one independent flow per image.

    Starts from zero flow; each step moves every flow component by
    ``xi_f / 20`` against the gradient sign, then projects onto the per-pixel
    magnitude bound.  Where the gradient vanishes entirely (e.g. at the zero
    start, where the distance term is flat) a seeded random sign direction is
    used instead.  ``loss_fn(warped, flows) -> per-sample loss`` replaces the
    default objective.  ``gradient="spsa"`` estimates gradients from
    objective values only.
    """
    _check_domain(domain)
    if gradient not in ("autograd", "spsa"):
        raise ConfigError(f"unknown gradient mode {gradient!r}")
    imgs = stack_images(images)
    cond_t = stack_images(conds) if conds is not None else None
    b, _, h, w = imgs.shape
    if model is not None and tuple(images[0].shape) != tuple(model.image_shape):
        raise DimensionError(f"model expects {model.image_shape}, got {images[0].shape}")

    if loss_fn is None:
        shift = _DiscriminatorShift(model, imgs, domain, cond_t)

        def objective(flows):
            return -shift(warp_tensor(imgs, flows)) + budget.lambda_flow * smoothness_term(flows)
    else:
        def objective(flows):
            return loss_fn(warp_tensor(imgs, flows), flows)

    gen = torch.Generator().manual_seed(int(seed))
    step = budget.xi_f / 20.0
    flows = torch.zeros(b, 2, h, w, dtype=DTYPE)
    traces = [[] for _ in range(b)]
    best_val = torch.full((b,), float("inf"), dtype=DTYPE)
    best_flow = flows.clone()
    best_it = torch.zeros(b, dtype=torch.long)
    iterates = [[] for _ in range(b)] if keep_iterates else None

    for it in range(budget.iters + 1):
        last = it == budget.iters
        if gradient == "autograd" and not last:
            f = flows.clone().requires_grad_(True)
            val = objective(f)
            (grad,) = torch.autograd.grad(val.sum(), f)
            val = val.detach()
        else:
            with torch.no_grad():
                val = objective(flows)
            if not last:
                grad = _spsa_gradient(objective, flows, step, spsa_samples, gen)
        _check_finite(it, val)
        for i in range(b):
            traces[i].append(float(val[i]))
            if keep_iterates:
                iterates[i].append(flows[i].clone())
        better = val < best_val
        best_val = torch.where(better, val, best_val)
        best_flow[better] = flows[better]
        best_it[better] = it
        if last:
            break
        direction = torch.sign(grad)
        stuck = direction.flatten(1).abs().sum(dim=1) == 0
        if stuck.any():
            rand = torch.randint(0, 2, flows.shape, generator=gen).to(DTYPE) * 2 - 1
            direction[stuck] = rand[stuck]
        flows = project_flow_tensor(flows - step * direction, budget.xi_f).detach()

    results = []
    for i in range(b):
        fnp = best_flow[i].to(torch.float64).numpy()
        flow = FlowField(fnp[0], fnp[1])
        results.append(
            FlowAttackResult(
                flow,
                # recomputed in float64 so it is exactly warp_with_flow(image, flow)
                warp_with_flow(images[i], flow),
                traces[i],
                budget,
                int(best_it[i]),
                [FlowField(*x.to(torch.float64).numpy()) for x in iterates[i]] if keep_iterates else None,
            )
        )
    return results


def _spsa_gradient(objective, flows, c, samples, gen):
    grad = torch.zeros_like(flows)
    with torch.no_grad():
        for _ in range(samples):
            delta = torch.randint(0, 2, flows.shape, generator=gen).to(flows.dtype) * 2 - 1
            diff = objective(flows + c * delta) - objective(flows - c * delta)
            grad += (diff / (2 * c)).view(-1, 1, 1, 1) * delta
    return grad / samples


def _check_finite(it, values):
    bad = ~torch.isfinite(values)
    if bad.any():
        raise OptimizationDivergenceError(it, float(values[bad][0]))


def optimize_flow(model: Im2ImModel | None, I: ImageBuffer, domain: str, budget: FlowBudget, seed: int = 0, cond: ImageBuffer | None = None, **kwargs) -> FlowAttackResult:
    return optimize_flow_batch(model, [I], domain, budget, seed, [cond] if cond is not None else None, **kwargs)[0]


def evaluate_flow_attack(
    model: Im2ImModel,
    data: PairedDataset,
    budget: FlowBudget,
    domain: str,
    seed: int = 0,
    attacked_model: Im2ImModel | None = None,
    metric: PerceptualMetric = DEFAULT_METRIC,
    batch_size: int = 32,
    results: list[FlowAttackResult] | None = None,
) -> tuple[list[dict], list[FlowAttackResult]]:
    """Attack every image and emit report rows.

    For ``domain="input"`` the perturbed output is G(warped x).  For
    ``domain="target"`` the output changes only through training: pass the
    model trained on warped targets as ``attacked_model`` (training-time mode),
    otherwise PO equals O and only the input-side distances are informative.
    """
    _check_domain(domain)
    if results is None:
        images = data.images(domain)
        conds = data.inputs() if domain == "target" else None
        results = []
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            results += optimize_flow_batch(model, images[sl], domain, budget, seed, conds[sl] if conds else None)
    clean_out = generate_batch(model, data.inputs())
    if domain == "input":
        pert_out = generate_batch(model, [r.perturbed for r in results])
    else:
        pert_out = generate_batch(attacked_model or model, data.inputs())
    rows = []
    for i, (pair, res) in enumerate(zip(data, results)):
        orig = pair.input if domain == "input" else pair.target
        rows.append(
            metric_row(
                i, "flow", domain, res.perturbed, orig, pert_out[i], clean_out[i], pair.target,
                pair.seg_labels, data.palette, data.num_classes, metric,
                xi_f=budget.xi_f,
                max_flow=float(res.flow.magnitude().max()),
            )
        )
    return rows, results


def flow_target_attack(model: Im2ImModel, budget: FlowBudget, seed: int = 0):
    """Target perturbation generator for training-time attacks: warps each y against ``model``'s D."""

    def attack(index: int, x: ImageBuffer, y: ImageBuffer) -> ImageBuffer:
        return optimize_flow(model, y, "target", budget, seed + index, cond=x).perturbed

    return attack


def precomputed_target_attack(perturbed: list[ImageBuffer]):
    def attack(index, x, y):
        return perturbed[index]

    return attack
