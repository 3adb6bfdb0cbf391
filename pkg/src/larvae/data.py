"""Procedural factor-labeled datasets, label-rate masking, batch sampling.

Each dataset enumerates the full Cartesian product of its factor values and
renders every combination exactly once (antialias-free, pixel-center tests).
Labels are the per-factor value index mapped affinely onto [-1, 1], so factor
indices and labels are mutually recoverable.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"LARVAE-DATA v1"


@dataclass(frozen=True)
class Factor:
    """A named factor with its ordered render values (reals in [0,1])."""

    name: str
    values: tuple

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError(f"factor {self.name!r} needs >= 2 values")


@dataclass(frozen=True)
class FactorSpec:
    factors: tuple
    image_shape: tuple  # (channels, h, w)

    @property
    def cardinalities(self):
        return tuple(len(f.values) for f in self.factors)

    @property
    def size(self):
        n = 1
        for c in self.cardinalities:
            n *= c
        return n


@dataclass
class FactorDataset:
    """Fully enumerated dataset: images in [0,1], labels in [-1,1]."""

    spec: FactorSpec
    images: np.ndarray        # (N, C, H, W) float64
    labels: np.ndarray        # (N, K) float64
    factor_index: np.ndarray  # (N, K) int64

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_factors(self):
        return len(self.spec.factors)


@dataclass(frozen=True)
class LabeledPool:
    """Indices of the labeled subset P_L and the rate that produced it."""

    indices: np.ndarray
    eta: float


def index_to_label(cardinalities, index_rows):
    """Map per-factor value indices onto [-1, 1] (affine per factor)."""
    idx = np.asarray(index_rows, dtype=np.float64)
    cards = np.asarray(cardinalities, dtype=np.float64)
    return 2.0 * idx / (cards - 1.0) - 1.0


def label_to_index(cardinalities, label_rows):
    """Invert index_to_label (rounds to the nearest valid index)."""
    lab = np.asarray(label_rows, dtype=np.float64)
    cards = np.asarray(cardinalities, dtype=np.float64)
    return np.rint((lab + 1.0) * (cards - 1.0) / 2.0).astype(np.int64)


def _enumerate_product(spec, render):
    cards = spec.cardinalities
    n = spec.size
    images = np.empty((n,) + spec.image_shape, dtype=np.float64)
    index = np.empty((n, len(cards)), dtype=np.int64)
    for i, combo in enumerate(np.ndindex(*cards)):
        index[i] = combo
        images[i] = render(combo)
    labels = index_to_label(cards, index)
    return FactorDataset(spec=spec, images=images, labels=labels, factor_index=index)


def _pixel_centers(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def generate_dsprites_mini(seed=0):
    """16x16 grayscale sprites: shape(3) x scale(4) x posX(8) x posY(8) = 768.

    Geometry keeps rendering injective (every factor combination yields a
    distinct image): position steps are exactly one pixel, so moving a sprite
    always translates its raster, and the scale list {1.5, 2.5, 3.5, 4.5}
    strictly grows every shape's raster. The seed is accepted for interface
    symmetry; rendering is deterministic.
    """
    del seed
    spec = FactorSpec(
        factors=(
            Factor("shape", (0.0, 0.5, 1.0)),
            Factor("scale", tuple(i / 3 for i in range(4))),
            Factor("posx", tuple(i / 7 for i in range(8))),
            Factor("posy", tuple(i / 7 for i in range(8))),
        ),
        image_shape=(1, 16, 16),
    )
    px, py = _pixel_centers(16, 16)

    def render(combo):
        shape_i, scale_i, x_i, y_i = combo
        h = 1.5 + 3.0 * spec.factors[1].values[scale_i]
        cx = 4.5 + 7.0 * spec.factors[2].values[x_i]
        cy = 4.5 + 7.0 * spec.factors[3].values[y_i]
        dx, dy = px - cx, py - cy
        if shape_i == 0:  # square
            mask = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        elif shape_i == 1:  # ellipse, half-height
            mask = (dx / h) ** 2 + (dy / (0.5 * h)) ** 2 <= 1.0
        else:  # upward isoceles triangle, apex at cy - h
            mask = (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / 2.0)
        return mask.astype(np.float64)[None]

    return _enumerate_product(spec, render)


def generate_colors_mini(seed=0):
    """16x16 RGB: objectHue(5) x backgroundHue(5) x posX(4) x posY(4) = 400.

    A fixed-size square of the object hue over a background of the background
    hue; the hue ranges avoid the HSV wrap so the value lists stay ordered.
    """
    del seed
    spec = FactorSpec(
        factors=(
            Factor("objhue", tuple(i / 4 for i in range(5))),
            Factor("bghue", tuple(i / 4 for i in range(5))),
            Factor("posx", tuple(i / 3 for i in range(4))),
            Factor("posy", tuple(i / 3 for i in range(4))),
        ),
        image_shape=(3, 16, 16),
    )
    px, py = _pixel_centers(16, 16)
    half = 2.5

    def render(combo):
        oh_i, bh_i, x_i, y_i = combo
        fg = colorsys.hsv_to_rgb(0.8 * spec.factors[0].values[oh_i], 1.0, 1.0)
        bg = colorsys.hsv_to_rgb(0.8 * spec.factors[1].values[bh_i], 0.6, 0.5)
        cx = 5.5 + 5.0 * spec.factors[2].values[x_i]
        cy = 5.5 + 5.0 * spec.factors[3].values[y_i]
        mask = (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
        img = np.empty((3, 16, 16), dtype=np.float64)
        for c in range(3):
            img[c] = np.where(mask, fg[c], bg[c])
        return img

    return _enumerate_product(spec, render)


PRESETS = {
    "dsprites-mini": generate_dsprites_mini,
    "colors-mini": generate_colors_mini,
}


def generate(preset, seed=0):
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
    return PRESETS[preset](seed)


def make_labeled_pool(dataset, eta, seed):
    """Uniform sample without replacement of round(eta * N) >= 1 indices."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    n = len(dataset)
    k = max(1, int(round(eta * n)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return LabeledPool(indices=idx, eta=eta)


def sample_batches(dataset, pool, batch_size, rng):
    """One unlabeled batch from all of D plus one labeled batch from P_L.

    Both are iid uniform draws (with replacement); overlap between the two is
    expected since P_L is a subset of D. The unlabeled view carries images
    only.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(pool.indices) == 0:
        raise ValueError("labeled pool is empty")
    n = len(dataset)
    u = rng.integers(0, n, size=batch_size)
    l = pool.indices[rng.integers(0, len(pool.indices), size=batch_size)]
    return dataset.images[u], (dataset.images[l], dataset.labels[l])


# ---------------------------------------------------------------------------
# file format: magic line; one "name;v1,v2,..." line per factor; image shape
# line "C H W"; then raw little-endian float64 images followed by labels.


def save_dataset(dataset, path):
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC + b"\n")
        for factor in dataset.spec.factors:
            vals = ",".join(repr(v) for v in factor.values)
            f.write(f"{factor.name};{vals}\n".encode())
        f.write(" ".join(str(d) for d in dataset.spec.image_shape).encode() + b"\n")
        f.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.labels, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.index(b"\n")
    if blob[:nl] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    pos = nl + 1
    factors = []
    while True:
        nl = blob.index(b"\n", pos)
        line = blob[pos:nl].decode()
        pos = nl + 1
        if ";" not in line:
            image_shape = tuple(int(d) for d in line.split())
            break
        name, vals = line.split(";", 1)
        factors.append(Factor(name, tuple(float(v) for v in vals.split(","))))
    spec = FactorSpec(factors=tuple(factors), image_shape=image_shape)
    n = spec.size
    img_count = n * int(np.prod(image_shape))
    lab_count = n * len(factors)
    expected = 8 * (img_count + lab_count)
    if len(blob) - pos != expected:
        raise ValueError(f"{path}: payload size {len(blob) - pos}, expected {expected}")
    images = np.frombuffer(blob, dtype="<f8", count=img_count, offset=pos)
    images = images.reshape((n,) + image_shape).copy()
    labels = np.frombuffer(blob, dtype="<f8", count=lab_count, offset=pos + 8 * img_count)
    labels = labels.reshape((n, len(factors))).copy()
    index = label_to_index(spec.cardinalities, labels)
    return FactorDataset(spec=spec, images=images, labels=labels, factor_index=index)
