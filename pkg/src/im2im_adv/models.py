"""Toy image-to-image models (generator, patch discriminator) and a toy classifier.

The networks are deliberately tiny so that training, attacks and gradient
checks all fit on one CPU core.  Images enter and leave every public function
as [0,1] ``ImageBuffer`` objects; the [-1,1] rescaling is internal.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ImageBuffer, PairedDataset, load_array, save_array
from .errors import CapabilityError, ConfigError, DimensionError, TrainingDivergenceError
from .geometry import image_to_tensor, tensor_to_image

DTYPE = torch.float32


class Generator(nn.Module):
    """Encoder-decoder with one skip connection (3 stages, <= 64 channels)."""

    def __init__(self, in_ch=3, out_ch=3, width=32):
        super().__init__()
        self.enc1 = nn.Conv2d(in_ch, width, 3, padding=1)
        self.enc2 = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.dec = nn.Conv2d(2 * width, width, 3, padding=1)
        self.out = nn.Conv2d(2 * width, out_ch, 3, padding=1)

    def forward(self, x):
        x = 2.0 * x - 1.0
        e1 = F.leaky_relu(self.enc1(x), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        m = F.leaky_relu(self.mid(e2), 0.2)
        d = F.leaky_relu(self.dec(F.interpolate(m, scale_factor=2, mode="nearest")), 0.2)
        return torch.sigmoid(self.out(torch.cat([d, e1], dim=1)))


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches; returns a logit map of shape (B, 1, H/4, W/4)."""

    def __init__(self, in_ch=6, width=32):
        super().__init__()
        self.c1 = nn.Conv2d(in_ch, width, 4, stride=2, padding=1)
        self.c2 = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * width, 1, 3, padding=1)

    def forward(self, z):
        z = 2.0 * z - 1.0
        z = F.leaky_relu(self.c1(z), 0.2)
        z = F.leaky_relu(self.c2(z), 0.2)
        return self.c3(z)


class ClassifierNet(nn.Module):
    def __init__(self, in_ch=3, num_classes=3, width=16):
        super().__init__()
        self.c1 = nn.Conv2d(in_ch, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = 2.0 * x - 1.0
        x = F.max_pool2d(F.relu(self.c1(x)), 2)
        x = F.relu(self.c2(x))
        return self.fc(x.mean(dim=(2, 3)))


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0
    l1_weight: float = 100.0
    cycle_weight: float = 10.0
    width: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    @classmethod
    def from_mapping(cls, cfg) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown training keys {sorted(extra)}")
        return cls(**cfg)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(eq=False)
class Im2ImModel:
    generator: nn.Module
    discriminator: nn.Module
    image_shape: tuple
    conditional: bool = True
    training_meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.generator.eval()
        self.discriminator.eval()
        self._double = None

    @property
    def architecture(self) -> str:
        return "toy-pix2pix-v1" if self.conditional else "toy-cyclegan-v1"

    def as_double(self) -> "Im2ImModel":
        """float64 copy used by gradient checks."""
        if self._double is None:
            self._double = Im2ImModel(
                copy.deepcopy(self.generator).double(),
                copy.deepcopy(self.discriminator).double(),
                self.image_shape,
                self.conditional,
                self.training_meta,
            )
        return self._double

    # batched tensor interface, (B, C, H, W) in [0, 1]
    def g(self, x: torch.Tensor) -> torch.Tensor:
        return self.generator(x)

    def d_logits(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        z = torch.cat([x, y], dim=1) if self.conditional else y
        return self.discriminator(z)

    def d_score_map(self, x, y):
        return torch.sigmoid(self.d_logits(x, y))

    def d_score(self, x, y):
        return self.d_score_map(x, y).mean(dim=(1, 2, 3))


@dataclass(eq=False)
class ToyClassifier:
    net: nn.Module
    num_classes: int
    image_shape: tuple
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("classifier needs at least two classes")
        self.net.eval()
        self._double = None

    def as_double(self) -> "ToyClassifier":
        if self._double is None:
            self._double = ToyClassifier(
                copy.deepcopy(self.net).double(), self.num_classes, self.image_shape, self.trained, self.meta
            )
        return self._double

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _check_shape(expected, image: ImageBuffer):
    if tuple(image.shape) != tuple(expected):
        raise DimensionError(f"model expects {tuple(expected)}, got {image.shape}")


def _to_model(t: torch.Tensor, module: nn.Module) -> torch.Tensor:
    return t.to(next(module.parameters()).dtype)


def stack_images(images, dtype=DTYPE) -> torch.Tensor:
    return torch.cat([image_to_tensor(im, dtype) for im in images], dim=0)


# ---------------------------------------------------------------------------
# forward passes


def generate(model: Im2ImModel, x: ImageBuffer) -> ImageBuffer:
    _check_shape(model.image_shape, x)
    with torch.no_grad():
        out = model.g(image_to_tensor(x, DTYPE))
    return tensor_to_image(out)


def generate_batch(model: Im2ImModel, xs) -> list[ImageBuffer]:
    with torch.no_grad():
        out = model.g(stack_images(xs))
    return [tensor_to_image(o[None]) for o in out]


def discriminate(model: Im2ImModel, x: ImageBuffer, y: ImageBuffer) -> float:
    """Realness score in (0, 1): mean patch probability.  Decision is ``score >= 0.5``."""
    if x.shape != y.shape:
        raise DimensionError(f"x {x.shape} vs y {y.shape}")
    _check_shape(model.image_shape, y)
    with torch.no_grad():
        s = model.d_score(image_to_tensor(x, DTYPE), image_to_tensor(y, DTYPE))
    # float32 sigmoid can round to exactly 0 or 1; keep the open interval
    return float(np.clip(float(s[0]), 1e-7, 1 - 1e-7))


def classify(clf: ToyClassifier, x: ImageBuffer) -> tuple[int, np.ndarray]:
    _check_shape(clf.image_shape, x)
    with torch.no_grad():
        logits = clf.logits(image_to_tensor(x, torch.float64).to(DTYPE)).double()
    probs = torch.softmax(logits, dim=1)[0].numpy()
    return int(np.argmax(probs)), probs


def classify_batch(clf: ToyClassifier, xs) -> np.ndarray:
    with torch.no_grad():
        logits = clf.logits(stack_images(xs))
    return logits.argmax(dim=1).numpy()


# ---------------------------------------------------------------------------
# gradient oracle


REGISTERED_OBJECTIVES = (
    "classifier_margin",
    "discriminator_score",
    "generator_distance",
    "linear_probe",
    "constant",
)


@dataclass(eq=False)
class Objective:
    """Scalar functional of one image; ``fn`` maps a (1, C, H, W) float64 tensor to a scalar."""

    name: str
    fn: Callable[[torch.Tensor], torch.Tensor]
    shape: tuple

    def value(self, x: ImageBuffer) -> float:
        with torch.no_grad():
            return float(self.fn(image_to_tensor(x)))


def classifier_margin(clf: ToyClassifier, label: int, other: int | None = None) -> Objective:
    """logit[other] - logit[label] (other defaults to the strongest competitor)."""
    net = clf.as_double()

    def fn(x):
        z = net.logits(x)[0]
        if other is None:
            masked = z.clone()
            masked[label] = -torch.inf
            return masked.max() - z[label]
        return z[other] - z[label]

    return Objective("classifier_margin", fn, clf.image_shape)


def discriminator_score(model: Im2ImModel, cond: ImageBuffer | None = None, through_generator=False) -> Objective:
    """D's mean patch score on ``y`` (or on ``G(x)`` when ``through_generator``)."""
    m = model.as_double()
    c = image_to_tensor(cond) if cond is not None else None

    def fn(x):
        cx = c if c is not None else x
        y = m.g(x) if through_generator else x
        return m.d_score(cx, y)[0]

    return Objective("discriminator_score", fn, model.image_shape)


def generator_distance(model: Im2ImModel, reference: ImageBuffer) -> Objective:
    """Mean squared distance between G(x) and a reference output."""
    m = model.as_double()
    ref = image_to_tensor(reference)

    def fn(x):
        return ((m.g(x) - ref) ** 2).mean()

    return Objective("generator_distance", fn, model.image_shape)


def linear_probe(weights: np.ndarray) -> Objective:
    w = torch.from_numpy(np.array(np.asarray(weights, dtype=np.float64).transpose(2, 0, 1)))[None]
    return Objective("linear_probe", lambda x: (w * x).sum(), tuple(np.shape(weights)))


def constant_objective(value: float, shape) -> Objective:
    return Objective("constant", lambda x: torch.tensor(float(value), dtype=torch.float64) + 0.0 * x.sum(), tuple(shape))


def input_gradient(objective: Objective, x: ImageBuffer) -> np.ndarray:
    """Analytic d objective / d x as an H x W x C array."""
    if not isinstance(objective, Objective) or objective.name not in REGISTERED_OBJECTIVES:
        raise CapabilityError(f"no gradient oracle registered for {objective!r}")
    if tuple(x.shape) != tuple(objective.shape):
        raise DimensionError(f"objective expects {objective.shape}, got {x.shape}")
    t = image_to_tensor(x).requires_grad_(True)
    val = objective.fn(t)
    (grad,) = torch.autograd.grad(val, t, allow_unused=True)
    if grad is None:
        return np.zeros(x.shape)
    return grad[0].numpy().transpose(1, 2, 0)


def finite_difference_gradient(objective, x: ImageBuffer, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of ``objective`` (an Objective or a callable on arrays).

    Works on the raw array, so probes may step slightly outside [0, 1].
    ``indices`` restricts evaluation to a list of (row, col, channel) triples.
    """
    if isinstance(objective, Objective):
        def f(arr):
            with torch.no_grad():
                return float(objective.fn(image_to_tensor(arr)))
    else:
        f = objective
    base = np.array(x.values if isinstance(x, ImageBuffer) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    todo = indices if indices is not None else list(np.ndindex(base.shape))
    for idx in todo:
        idx = tuple(idx)
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# training

TargetAttack = Callable[[int, ImageBuffer, ImageBuffer], ImageBuffer]


def _rng(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _finite(epoch, *losses):
    for loss in losses:
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(epoch, loss.item())


def train_im2im(dataset: PairedDataset, config: TrainConfig | dict | None = None, target_attack: TargetAttack | None = None, attack_spec: dict | None = None) -> Im2ImModel:
    """Paired minmax training with an L1 reconstruction term.

    When ``target_attack`` is given, every target is replaced by its perturbed
    version before training starts; generator inputs stay clean.
    """
    config = _train_config(config)
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    gen = _rng(config.seed)
    c = dataset[0].input.channels
    G = Generator(c, dataset[0].target.channels, config.width)
    D = PatchDiscriminator(c + dataset[0].target.channels, config.width)
    xs = stack_images(dataset.inputs())
    if target_attack is None:
        ys = stack_images(dataset.targets())
    else:
        ys = stack_images([target_attack(i, p.input, p.target) for i, p in enumerate(dataset)])
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=(0.5, 0.999))
    history = []
    for epoch in range(1, config.epochs + 1):
        l1_sum = 0.0
        for idx in _batches(len(dataset), config.batch_size, gen):
            x, y = xs[idx], ys[idx]
            fake = G(x)
            # discriminator: maximise log D(x,y) + log(1 - D(x,G(x)))
            real_logit = D(torch.cat([x, y], 1))
            fake_logit = D(torch.cat([x, fake.detach()], 1))
            loss_d = F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit)) + \
                F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            # generator: minimise log(1 - D(x,G(x))) + l1
            fake_logit = D(torch.cat([x, fake], 1))
            adv = -F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
            l1 = (fake - y).abs().mean()
            loss_g = adv + config.l1_weight * l1
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            _finite(epoch, loss_d, loss_g)
            l1_sum += l1.item() * len(idx)
        history.append(l1_sum / len(dataset))
    meta = {
        "epochs": config.epochs,
        "seed": config.seed,
        "dataset": dataset.name,
        "target_perturbation": attack_spec if target_attack is not None else None,
        "config": config.as_dict(),
        "l1_history": history,
    }
    return Im2ImModel(G, D, tuple(dataset[0].input.shape), True, meta)


def train_cycle(dataset: PairedDataset, config: TrainConfig | dict | None = None, target_attack: TargetAttack | None = None, attack_spec: dict | None = None) -> Im2ImModel:
    """Unpaired A -> B training with cycle consistency; the returned model maps A to B."""
    config = _train_config(config)
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    gen = _rng(config.seed)
    c = dataset[0].input.channels
    G_ab, G_ba = Generator(c, c, config.width), Generator(c, c, config.width)
    D_b, D_a = PatchDiscriminator(c, config.width), PatchDiscriminator(c, config.width)
    xs = stack_images(dataset.inputs())
    if target_attack is None:
        ys = stack_images(dataset.targets())
    else:
        ys = stack_images([target_attack(i, p.input, p.target) for i, p in enumerate(dataset)])
    opt_g = torch.optim.Adam(list(G_ab.parameters()) + list(G_ba.parameters()), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(list(D_a.parameters()) + list(D_b.parameters()), lr=config.lr, betas=(0.5, 0.999))

    def bce(logit, target):
        return F.binary_cross_entropy_with_logits(logit, torch.full_like(logit, target))

    history = []
    for epoch in range(1, config.epochs + 1):
        cyc_sum = 0.0
        for idx in _batches(len(dataset), config.batch_size, gen):
            a = xs[idx]
            b = ys[idx[torch.randperm(len(idx), generator=gen)]]
            fb, fa = G_ab(a), G_ba(b)
            loss_d = bce(D_b(b), 1) + bce(D_b(fb.detach()), 0) + bce(D_a(a), 1) + bce(D_a(fa.detach()), 0)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            adv = bce(D_b(fb), 1) + bce(D_a(fa), 1)
            cyc = (G_ba(fb) - a).abs().mean() + (G_ab(fa) - b).abs().mean()
            loss_g = adv + config.cycle_weight * cyc
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            _finite(epoch, loss_d, loss_g)
            cyc_sum += cyc.item() * len(idx)
        history.append(cyc_sum / len(dataset))
    meta = {
        "epochs": config.epochs,
        "seed": config.seed,
        "dataset": dataset.name,
        "target_perturbation": attack_spec if target_attack is not None else None,
        "config": config.as_dict(),
        "cycle_history": history,
    }
    return Im2ImModel(G_ab, D_b, tuple(dataset[0].input.shape), False, meta, {"generator_ba": G_ba, "discriminator_a": D_a})


def train_classifier(dataset: PairedDataset, config: TrainConfig | dict | None = None, domain: str = "input", labels=None) -> ToyClassifier:
    """Train C to predict the dominant foreground class of each image."""
    config = _train_config(config)
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    num_classes = dataset.num_classes - 1
    if num_classes < 2:
        raise ConfigError("classifier needs a dataset with at least two foreground classes")
    images = dataset.images(domain)
    y = torch.as_tensor(dataset.dominant_labels() if labels is None else np.asarray(labels), dtype=torch.long)
    torch.manual_seed(config.seed)
    gen = _rng(config.seed)
    net = ClassifierNet(images[0].channels, num_classes)
    xs = stack_images(images)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        for idx in _batches(len(images), config.batch_size, gen):
            loss = F.cross_entropy(net(xs[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            _finite(epoch, loss)
    net.eval()
    with torch.no_grad():
        acc = float((net(xs).argmax(1) == y).float().mean())
    meta = {"epochs": config.epochs, "seed": config.seed, "dataset": dataset.name, "domain": domain, "train_accuracy": acc}
    return ToyClassifier(net, num_classes, tuple(images[0].shape), True, meta)


def untrained_im2im(image_shape=(32, 32, 3), seed=0, width=32) -> Im2ImModel:
    torch.manual_seed(seed)
    c = image_shape[2]
    return Im2ImModel(Generator(c, c, width), PatchDiscriminator(2 * c, width), tuple(image_shape), True, {"epochs": 0, "seed": seed})


def accuracy(clf: ToyClassifier, images, labels) -> float:
    return float(np.mean(classify_batch(clf, images) == np.asarray(labels)))


def _train_config(config) -> TrainConfig:
    if config is None:
        return TrainConfig()
    if isinstance(config, dict):
        return TrainConfig.from_mapping(config)
    return config


# ---------------------------------------------------------------------------
# checkpoints


def _modules(obj) -> dict[str, nn.Module]:
    if isinstance(obj, Im2ImModel):
        mods = {"generator": obj.generator, "discriminator": obj.discriminator}
        mods.update(obj.extras)
        return mods
    return {"classifier": obj.net}


def save_checkpoint(obj, directory) -> Path:
    """Write ``params.f32`` (float32 container) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for mod_name, mod in _modules(obj).items():
        for pname, p in mod.state_dict().items():
            arr = p.detach().to(torch.float32).numpy().ravel()
            entries.append({"name": f"{mod_name}.{pname}", "shape": list(p.shape), "offset": offset})
            chunks.append(arr)
            offset += arr.size
    save_array(directory / "params.f32", np.concatenate(chunks))
    if isinstance(obj, Im2ImModel):
        manifest = {
            "architecture": obj.architecture,
            "image_shape": list(obj.image_shape),
            "width": obj.training_meta.get("config", {}).get("width", 32),
            "training_meta": obj.training_meta,
        }
    else:
        manifest = {
            "architecture": "toy-classifier-v1",
            "image_shape": list(obj.image_shape),
            "num_classes": obj.num_classes,
            "training_meta": obj.meta,
        }
    manifest["tensors"] = entries
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    flat, _ = load_array(directory / "params.f32")
    shape = tuple(manifest["image_shape"])
    c = shape[2]
    arch = manifest["architecture"]
    if arch == "toy-pix2pix-v1":
        w = manifest.get("width", 32)
        obj = Im2ImModel(Generator(c, c, w), PatchDiscriminator(2 * c, w), shape, True, manifest["training_meta"])
    elif arch == "toy-cyclegan-v1":
        w = manifest.get("width", 32)
        obj = Im2ImModel(Generator(c, c, w), PatchDiscriminator(c, w), shape, False, manifest["training_meta"],
                         {"generator_ba": Generator(c, c, w), "discriminator_a": PatchDiscriminator(c, w)})
    elif arch == "toy-classifier-v1":
        obj = ToyClassifier(ClassifierNet(c, manifest["num_classes"]), manifest["num_classes"], shape, True, manifest["training_meta"])
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    mods = _modules(obj)
    states = {name: {} for name in mods}
    for e in manifest["tensors"]:
        mod_name, pname = e["name"].split(".", 1)
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        vals = flat[e["offset"] : e["offset"] + n].astype(np.float32).reshape(e["shape"])
        states[mod_name][pname] = torch.from_numpy(vals)
    for name, mod in mods.items():
        mod.load_state_dict(states[name])
        mod.eval()
    return obj
