"""Universal (image-agnostic) perturbations built against a classifier, evaluated on G and D."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import ImageBuffer, PairedDataset, Perturbation, UniversalBudget, apply_perturbation, lp_norm, parse_norm_order
from .errors import ArgumentError, CapabilityError, ConfigError, DimensionError
from .geometry import image_to_tensor
from .metrics import DEFAULT_METRIC, PerceptualMetric
from .models import DTYPE, Im2ImModel, ToyClassifier, classify_batch, finite_difference_gradient, generate_batch, stack_images
from .report import metric_row

OVERSHOOT = 0.02
DOMAINS = ("input", "target")


def project_lp(pert: Perturbation, xi: float, p) -> Perturbation:
    """Euclidean projection onto the lp ball of radius ``xi`` (p in {2, inf})."""
    p = parse_norm_order(p)
    if not xi > 0:
        raise ArgumentError("xi must be positive")
    d = np.asarray(pert.delta, dtype=np.float64)
    if p == math.inf:
        return Perturbation(np.clip(d, -xi, xi))
    norm = lp_norm(d, 2)
    if norm <= xi:
        return Perturbation(d.copy())
    return Perturbation(d * (xi / norm))


@dataclass(eq=False)
class DeepFoolResult:
    pert: Perturbation
    fooled: bool
    steps: int
    label: int


def _logit_jacobian(clf: ToyClassifier, arr: np.ndarray, gradient: str):
    """Logits at ``arr`` and their input gradients, shapes (K,) and (K, H, W, C)."""
    if gradient == "autograd":
        net = clf.as_double()
        t = image_to_tensor(arr).requires_grad_(True)
        z = net.logits(t)[0]
        grads = [torch.autograd.grad(z[k], t, retain_graph=True)[0][0].numpy().transpose(1, 2, 0) for k in range(len(z))]
        return z.detach().numpy(), np.stack(grads)

    net = clf.as_double()

    def logits(a):
        with torch.no_grad():
            return net.logits(image_to_tensor(a))[0].numpy()

    z = logits(arr)
    grads = [finite_difference_gradient(lambda a, k=k: float(logits(a)[k]), arr) for k in range(len(z))]
    return z, np.stack(grads)


def minimal_per_image_perturbation(
    clf: ToyClassifier, x: ImageBuffer, max_steps: int = 50, gradient: str = "autograd", clip: bool = False
) -> DeepFoolResult:
    """DeepFool: repeated linearised steps toward the nearest decision boundary.

    The accumulated step is scaled by ``1 + OVERSHOOT`` before every check, so
    a linear classifier is crossed in one iteration.  With ``clip`` the
    iterate is clamped to [0, 1] before each check, so the flip survives
    pixel saturation.  ``gradient="finite_difference"`` only queries logits.
    """
    if gradient not in ("autograd", "finite_difference"):
        raise ConfigError(f"unknown gradient mode {gradient!r}")
    if tuple(x.shape) != tuple(clf.image_shape):
        raise DimensionError(f"classifier expects {clf.image_shape}, got {x.shape}")
    base = np.array(x.values, dtype=np.float64)
    z, _ = _logit_jacobian(clf, base, gradient)
    label = int(np.argmax(z))
    total = np.zeros_like(base)
    current = base
    for step in range(1, max_steps + 1):
        z, jac = _logit_jacobian(clf, current, gradient)
        best_ratio, best_r = math.inf, None
        for k in range(len(z)):
            if k == label:
                continue
            w = jac[k] - jac[label]
            f = z[k] - z[label]
            wn = float(np.sum(w * w))
            if wn == 0.0:
                continue
            ratio = abs(f) / math.sqrt(wn)
            if ratio < best_ratio:
                best_ratio = ratio
                best_r = (abs(f) / wn) * w
        if best_r is None:
            return DeepFoolResult(Perturbation((1 + OVERSHOOT) * total), False, step, label)
        total = total + best_r
        current = base + (1 + OVERSHOOT) * total
        if clip:
            current = np.clip(current, 0.0, 1.0)
        # same precision as classify_batch, so a flip here is a flip there
        with torch.no_grad():
            new_label = int(clf.logits(image_to_tensor(current, DTYPE))[0].argmax())
        if new_label != label:
            return DeepFoolResult(Perturbation((1 + OVERSHOOT) * total), True, step, label)
    return DeepFoolResult(Perturbation((1 + OVERSHOOT) * total), False, max_steps, label)


@dataclass(eq=False)
class UniversalResult:
    pert: Perturbation
    achieved_fooling_rate: float
    passes_used: int
    budget: UniversalBudget
    history: list[float] = field(default_factory=list)


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}")


def _perturbed(images, pert: Perturbation):
    return [apply_perturbation(im, pert) for im in images]


def fooling_rate(clf: ToyClassifier, data: PairedDataset, pert: Perturbation, domain: str = "input") -> float:
    """Fraction of images whose predicted label changes under ``pert``."""
    _check_domain(domain)
    images = data.images(domain)
    if not images:
        return 0.0
    if images[0].shape != pert.shape:
        raise DimensionError(f"images {images[0].shape} vs perturbation {pert.shape}")
    clean = classify_batch(clf, images)
    pert_labels = classify_batch(clf, _perturbed(images, pert))
    return float(np.mean(clean != pert_labels))


def compute_universal_perturbation(
    clf: ToyClassifier,
    data: PairedDataset,
    domain: str,
    budget: UniversalBudget,
    seed: int = 0,
    max_steps: int = 50,
    gradient: str = "autograd",
) -> UniversalResult:
    """Projected aggregation of per-image DeepFool increments until ``1 - delta`` of images are fooled.

    Each pass visits the images in a seeded random order.  Images the
    classifier already gets wrong (against the dominant-class label) are
    skipped.  The radius is ``budget.xi / 255`` in both norms.
    """
    _check_domain(domain)
    if not clf.trained:
        raise CapabilityError("classifier is untrained")
    images = data.images(domain)
    shape = images[0].shape
    pert = Perturbation.zeros(shape)
    target_rate = 1.0 - budget.delta
    rate = fooling_rate(clf, data, pert, domain)
    history = [rate]
    if rate >= target_rate:
        return UniversalResult(pert, rate, 0, budget, history)
    clean = classify_batch(clf, images)
    truth = data.dominant_labels()
    usable = [i for i in range(len(images)) if clean[i] == truth[i]]
    rng = np.random.default_rng(seed)
    best_rate, best_pert, passes = rate, pert, 0
    for passes in range(1, budget.max_passes + 1):
        for i in rng.permutation(usable):
            xi_img = apply_perturbation(images[i], pert)
            if classify_batch(clf, [xi_img])[0] != clean[i]:
                continue
            step = minimal_per_image_perturbation(clf, xi_img, max_steps, gradient, clip=True)
            if not step.fooled:
                continue
            pert = project_lp(Perturbation(pert.delta + step.pert.delta), budget.xi_unit, budget.p)
        rate = fooling_rate(clf, data, pert, domain)
        history.append(rate)
        if rate > best_rate:
            best_rate, best_pert = rate, pert
        if rate >= target_rate:
            break
    # aggregation can oscillate between passes; keep the best projected iterate
    return UniversalResult(best_pert, best_rate, passes, budget, history)


def evaluate_universal_attack(
    model: Im2ImModel,
    data: PairedDataset,
    result: UniversalResult,
    domain: str,
    attacked_model: Im2ImModel | None = None,
    metric: PerceptualMetric = DEFAULT_METRIC,
) -> list[dict]:
    """Report rows plus the discriminator decision flip for each image.

    input: D(x, G(x + pert)) against D(x, G(x)).  target: D(x, y + pert)
    against D(x, y); the output only changes through ``attacked_model``
    (a model trained on perturbed targets).  Decisions use the 0.5 threshold.
    """
    _check_domain(domain)
    if tuple(result.pert.shape) != tuple(model.image_shape):
        raise ConfigError(f"perturbation {result.pert.shape} does not match model {model.image_shape}")
    xs = data.inputs()
    originals = data.images(domain)
    perturbed = _perturbed(originals, result.pert)
    clean_out = generate_batch(model, xs)
    if domain == "input":
        pert_out = generate_batch(model, perturbed)
        d_clean_y, d_pert_y = clean_out, pert_out
    else:
        pert_out = generate_batch(attacked_model or model, xs)
        d_clean_y, d_pert_y = originals, perturbed
    with torch.no_grad():
        cond = stack_images(xs)
        s_clean = model.d_score(cond, stack_images(d_clean_y)).double().numpy()
        s_pert = model.d_score(cond, stack_images(d_pert_y)).double().numpy()
    rows = []
    for i, pair in enumerate(data):
        flip = bool((s_clean[i] >= 0.5) != (s_pert[i] >= 0.5))
        rows.append(
            metric_row(
                i, "universal", domain, perturbed[i], originals[i], pert_out[i], clean_out[i], pair.target,
                pair.seg_labels, data.palette, data.num_classes, metric,
                d_flip=int(flip),
                d_score_clean=float(s_clean[i]),
                d_score_perturbed=float(s_pert[i]),
                xi=result.budget.xi,
            )
        )
    return rows
