"""Shared image, perturbation, budget and dataset types.

Pixel values live in [0, 1] at every module boundary.  Perturbations are
signed and unclamped; clamping happens only in :func:`apply_perturbation`.
Coordinates follow ``u`` = column (rightward), ``v`` = row (downward).
"""

from __future__ import annotations

import json
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ArgumentError, ConfigError, DataError, DimensionError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


_RANGE_TOL = 1e-9


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """H x W x C float image with values in [0, 1] (C is 1 or 3)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or min(arr.shape[:2]) < 1:
            raise DimensionError(f"expected H x W x C with C in {{1,3}}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite values")
        lo, hi = arr.min(), arr.max()
        if lo < -_RANGE_TOL or hi > 1 + _RANGE_TOL:
            raise DataError(f"pixel values must lie in [0,1], got [{lo:.4g}, {hi:.4g}]")
        object.__setattr__(self, "values", _frozen(np.clip(arr, 0.0, 1.0)))

    @classmethod
    def clamped(cls, values) -> "ImageBuffer":
        return cls(np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64)), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Signed additive perturbation; never clamped on its own."""

    delta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"perturbation must be H x W x C, got {arr.shape}")
        object.__setattr__(self, "delta", _frozen(arr))

    @classmethod
    def zeros(cls, shape) -> "Perturbation":
        return cls(np.zeros(shape))

    @property
    def shape(self):
        return self.delta.shape


@dataclass(frozen=True)
class UniversalBudget:
    """Radius ``xi`` in 8-bit pixel units, norm order ``p`` and fooling slack ``delta``."""

    xi: float
    p: float = math.inf
    delta: float = 0.2
    max_passes: int = 10

    def __post_init__(self):
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        object.__setattr__(self, "p", parse_norm_order(self.p))
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.max_passes < 1:
            raise ConfigError("max_passes must be positive")

    @property
    def xi_unit(self) -> float:
        """Radius converted to the [0,1] pixel scale."""
        return self.xi / 255.0


@dataclass(frozen=True)
class FlowBudget:
    xi_f: float
    lambda_flow: float = 0.05
    iters: int = 200

    def __post_init__(self):
        if not self.xi_f > 0:
            raise ConfigError("xi_f must be positive")
        if self.lambda_flow < 0:
            raise ConfigError("lambda_flow must be non-negative")
        if self.iters < 0:
            raise ConfigError("iters must be non-negative")


def parse_norm_order(p) -> float:
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "linf", "∞"):
            return math.inf
        try:
            p = float(key)
        except ValueError:
            raise ArgumentError(f"unsupported norm order {p!r}") from None
    if p == 2:
        return 2.0
    if p == math.inf:
        return math.inf
    raise ArgumentError(f"unsupported norm order {p!r}; use 2 or inf")


def lp_norm(delta, p) -> float:
    p = parse_norm_order(p)
    arr = np.asarray(delta, dtype=np.float64).ravel()
    if arr.size == 0:
        return 0.0
    if p == 2:
        return float(np.sqrt(np.sum(arr * arr)))
    return float(np.max(np.abs(arr)))


def apply_perturbation(image: ImageBuffer, pert: Perturbation) -> ImageBuffer:
    if image.shape != pert.shape:
        raise DimensionError(f"image {image.shape} vs perturbation {pert.shape}")
    return ImageBuffer(np.clip(image.values + pert.delta, 0.0, 1.0))


# ---------------------------------------------------------------------------
# synthetic paired dataset

# Cityscapes-like flat label colours (input domain X).
LABEL_PALETTE = np.array(
    [
        [128, 64, 128],  # road / background
        [0, 0, 142],  # car
        [220, 20, 60],  # person
        [70, 70, 70],  # building
        [107, 142, 35],  # vegetation
        [70, 130, 180],  # sky
        [220, 220, 0],  # sign
        [153, 153, 153],  # pole
    ],
    dtype=np.float64,
) / 255.0

# Base colours of the "photo" rendering (target domain Y).
PHOTO_PALETTE = np.array(
    [
        [0.35, 0.33, 0.30],
        [0.85, 0.20, 0.15],
        [0.95, 0.80, 0.55],
        [0.55, 0.45, 0.85],
        [0.20, 0.60, 0.25],
        [0.60, 0.85, 0.95],
        [0.95, 0.90, 0.20],
        [0.80, 0.80, 0.80],
    ]
)

# Alternative photo palette for the unpaired texture task (domain B).
TEXTURE_B_PALETTE = np.array(
    [
        [0.90, 0.90, 0.88],
        [0.10, 0.10, 0.12],
        [0.15, 0.55, 0.60],
        [0.75, 0.55, 0.10],
        [0.50, 0.15, 0.45],
        [0.30, 0.30, 0.70],
        [0.05, 0.40, 0.10],
        [0.60, 0.20, 0.20],
    ]
)

MAX_CLASSES = len(LABEL_PALETTE)


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 96
    height: int = 32
    width: int = 32
    classes: int = 4
    seed: int = 0
    kind: str = "paired"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("dataset needs at least one pair")
        if self.classes < 2:
            raise ConfigError("dataset needs at least two classes")
        if self.classes > MAX_CLASSES:
            raise ConfigError(f"at most {MAX_CLASSES} classes are supported")
        if not (4 <= self.height <= 64 and 4 <= self.width <= 64):
            raise ConfigError("height and width must lie in [4, 64]")
        if self.kind not in ("paired", "texture"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")

    @classmethod
    def from_mapping(cls, cfg) -> "DatasetSpec":
        known = {"n", "height", "width", "classes", "seed", "kind"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown dataset keys {sorted(extra)}")
        return cls(**cfg)

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "height": self.height,
            "width": self.width,
            "classes": self.classes,
            "seed": self.seed,
            "kind": self.kind,
        }


@dataclass(frozen=True, eq=False)
class Pair:
    input: ImageBuffer
    target: ImageBuffer
    seg_labels: np.ndarray


@dataclass(frozen=True, eq=False)
class PairedDataset:
    pairs: tuple
    name: str
    seed: int
    num_classes: int
    palette: np.ndarray = field(default_factory=lambda: PHOTO_PALETTE)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.pairs:
            hw = self.pairs[0].input.shape[:2]
            for p in self.pairs:
                if p.input.shape[:2] != hw or p.target.shape[:2] != hw or p.seg_labels.shape != hw:
                    raise DimensionError("all images in a dataset must share one (H, W)")
                if p.seg_labels.min() < 0 or p.seg_labels.max() >= self.num_classes:
                    raise DataError("seg_labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pairs[0].input.shape[:2]

    def inputs(self) -> list[ImageBuffer]:
        return [p.input for p in self.pairs]

    def targets(self) -> list[ImageBuffer]:
        return [p.target for p in self.pairs]

    def images(self, domain: str) -> list[ImageBuffer]:
        if domain == "input":
            return self.inputs()
        if domain == "target":
            return self.targets()
        raise ConfigError(f"domain must be 'input' or 'target', got {domain!r}")

    def dominant_labels(self) -> np.ndarray:
        return np.array([dominant_class(p.seg_labels, self.num_classes) for p in self.pairs])

    def subset(self, indices: Sequence[int], name: str | None = None) -> "PairedDataset":
        return PairedDataset(
            tuple(self.pairs[i] for i in indices),
            name or self.name,
            self.seed,
            self.num_classes,
            self.palette,
        )

    def split(self, n_test: int) -> tuple["PairedDataset", "PairedDataset"]:
        """Last ``n_test`` pairs become the test split."""
        if not 0 < n_test < len(self):
            raise ConfigError(f"cannot split {len(self)} pairs with n_test={n_test}")
        k = len(self) - n_test
        return (
            self.subset(range(k), f"{self.name}-train"),
            self.subset(range(k, len(self)), f"{self.name}-test"),
        )


def dominant_class(seg_labels: np.ndarray, num_classes: int) -> int:
    """Most frequent foreground class (ties toward the smaller id), 0-based among classes 1..K-1."""
    counts = np.bincount(seg_labels.ravel(), minlength=num_classes)[1:]
    return int(np.argmax(counts))


def sample_layout(rng: np.random.Generator, height: int, width: int, classes: int) -> list[dict]:
    """Draw the shape list for one image: one dominant shape plus small distractors."""
    shapes = []
    fg = classes - 1
    main = int(rng.integers(1, classes))
    # dominant shape covers roughly a quarter to a third of the frame
    ru = rng.uniform(0.26, 0.36) * width
    rv = rng.uniform(0.26, 0.36) * height
    cu = rng.uniform(ru * 0.8, width - ru * 0.8)
    cv = rng.uniform(rv * 0.8, height - rv * 0.8)
    kind = "ellipse" if rng.random() < 0.5 else "rect"
    shapes.append(_shape(kind, main, cu, cv, ru, rv))
    n_small = int(rng.integers(1, 3))
    for _ in range(n_small):
        cls = int(rng.integers(1, classes)) if fg > 1 else main
        if fg > 1 and cls == main:
            cls = 1 + (cls % fg)
        ru = rng.uniform(0.08, 0.14) * width
        rv = rng.uniform(0.08, 0.14) * height
        cu = rng.uniform(ru, width - ru)
        cv = rng.uniform(rv, height - rv)
        kind = "ellipse" if rng.random() < 0.5 else "rect"
        shapes.append(_shape(kind, cls, cu, cv, ru, rv))
    return shapes


def _shape(kind, cls, cu, cv, ru, rv) -> dict:
    return {"kind": kind, "cls": cls, "cu": float(cu), "cv": float(cv), "ru": float(ru), "rv": float(rv)}


def rasterize_layout(shapes: list[dict], height: int, width: int) -> np.ndarray:
    """Paint shapes in order (later shapes occlude earlier ones); pixel centres at integer coords."""
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    labels = np.zeros((height, width), dtype=np.int64)
    for s in shapes:
        du = (uu - s["cu"]) / s["ru"]
        dv = (vv - s["cv"]) / s["rv"]
        if s["kind"] == "ellipse":
            mask = du * du + dv * dv <= 1.0
        else:
            mask = (np.abs(du) <= 1.0) & (np.abs(dv) <= 1.0)
        labels[mask] = s["cls"]
    return labels


def render_label_image(seg_labels: np.ndarray) -> np.ndarray:
    return LABEL_PALETTE[seg_labels]


SHADE_PERIOD = 6


def render_photo(seg_labels: np.ndarray, palette: np.ndarray = PHOTO_PALETTE, invert_shading=False) -> np.ndarray:
    """Photo-like rendering: base colour per class with shading bands parallel to region boundaries.

    The bands give the photo texture away from edges, so a local warp changes
    pixels everywhere rather than only on class boundaries.
    """
    dist = np.zeros(seg_labels.shape, dtype=np.float64)
    for c in np.unique(seg_labels):
        mask = seg_labels == c
        # border of the frame does not count as a boundary
        d = ndimage.distance_transform_cdt(np.pad(mask, 1, mode="edge"), metric="taxicab")[1:-1, 1:-1]
        dist[mask] = d[mask]
    half = SHADE_PERIOD / 2
    ramp = np.abs(((dist - 1) % SHADE_PERIOD) - half) / half
    if invert_shading:
        ramp = 1.0 - ramp
    shade = 0.6 + 0.4 * ramp
    return np.clip(palette[seg_labels] * shade[:, :, None], 0.0, 1.0)


def make_synthetic_dataset(spec: DatasetSpec | dict) -> PairedDataset:
    """Paired label-map -> photo dataset, a pure function of ``spec``.

    ``kind="texture"`` builds the unpaired texture-A -> texture-B task: inputs
    and targets come from independent layouts and share no alignment.
    """
    if isinstance(spec, dict):
        spec = DatasetSpec.from_mapping(spec)
    pairs = []
    for i in range(spec.n):
        rng = np.random.default_rng([spec.seed, i])
        layout = sample_layout(rng, spec.height, spec.width, spec.classes)
        labels = rasterize_layout(layout, spec.height, spec.width)
        if spec.kind == "paired":
            x = render_label_image(labels)
            y = render_photo(labels)
        else:
            other = rasterize_layout(sample_layout(rng, spec.height, spec.width, spec.classes), spec.height, spec.width)
            x = render_photo(labels, PHOTO_PALETTE)
            y = render_photo(other, TEXTURE_B_PALETTE, invert_shading=True)
        pairs.append(Pair(ImageBuffer(x), ImageBuffer(y), labels))
    name = f"{spec.kind}-n{spec.n}-{spec.height}x{spec.width}-c{spec.classes}-s{spec.seed}"
    # outputs are labelled in the target palette; for the texture task a faithful
    # translation keeps the input layout, so it is scored against the input labels
    palette = (PHOTO_PALETTE if spec.kind == "paired" else TEXTURE_B_PALETTE)[: spec.classes]
    return PairedDataset(tuple(pairs), name, spec.seed, spec.classes, palette)


# ---------------------------------------------------------------------------
# on-disk formats

CONTAINER_MAGIC = b"I2IF"


def save_array(path, arr, meta: dict | None = None) -> Path:
    """Write ``arr`` as little-endian float32 behind a JSON header.

    Layout: 4-byte magic ``I2IF``, uint32 LE header length, UTF-8 JSON header
    ``{"shape", "dtype": "float32", "order": "row-major", "meta"}``, raw data.
    """
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    header = {"shape": list(data.shape), "dtype": "float32", "order": "row-major", "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(data.tobytes(order="C"))
    return path


def load_array(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CONTAINER_MAGIC:
        raise DataError(f"{path}: not a float32 container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("dtype") != "float32" or header.get("order") != "row-major":
        raise DataError(f"{path}: unsupported container header {header}")
    shape = tuple(header["shape"])
    arr = np.frombuffer(raw[8 + hlen :], dtype="<f4").reshape(shape)
    return arr.astype(np.float64), header


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image) -> Path:
    values = image.values if isinstance(image, ImageBuffer) else np.asarray(image)
    u8 = to_uint8(values)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path, format="PNG")
    return path


def load_config_file(path) -> dict:
    """Read a TOML or JSON config file into a dict."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text.decode("utf-8"))
    if path.suffix.lower() in (".toml", ".tml"):
        return tomllib.loads(text.decode("utf-8"))
    try:
        return json.loads(text.decode("utf-8"))
    except json.JSONDecodeError:
        return tomllib.loads(text.decode("utf-8"))
