"""Image I/O, the synthetic two-domain dataset, and unpaired iteration.

Images live in [-1, 1] as float tensors of shape [3, H, W]; files are 8-bit
RGB PNG. The synthetic dataset provides two unpaired domains at desk scale:
domain A draws axis-aligned squares, domain B filled circles. Every sample
is a pure function of (seed, index).
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T

SPLIT_DIRS = ("trainA", "trainB", "testA", "testB")


def to_pixels(arr):
    """[-1, 1] float array -> uint8, clamping out-of-range values."""
    clipped = np.clip(np.asarray(arr), -1.0, 1.0)
    return np.round((clipped + 1.0) * 127.5).astype(np.uint8)


def from_pixels(pix):
    """uint8 -> [-1, 1] float array (2 * p/255 - 1)."""
    return (np.asarray(pix, dtype=T.get_default_dtype()) / 255.0) * 2.0 - 1.0


def save_image(arr, path):
    """Write a [3, H, W] tensor in [-1, 1] as an 8-bit RGB PNG."""
    arr = arr.data if isinstance(arr, T.Tensor) else np.asarray(arr)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"save_image expects one image, got {arr.shape}")
        arr = arr[0]
    pix = to_pixels(arr).transpose(1, 2, 0)
    Image.fromarray(pix, mode="RGB").save(path, format="PNG")


def load_image(path, resolution=None):
    """Read an 8-bit RGB image; optional bilinear resize to a square size."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValueError(f"unsupported image mode {img.mode!r} in {path}")
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        pix = np.asarray(img)
    return from_pixels(pix).transpose(2, 0, 1)


# -- synthetic domains ------------------------------------------------------

SQUARES = "squares"
CIRCLES = "circles"


@dataclass
class SyntheticDomainSpec:
    shape_kind: str = SQUARES        # squares (domain A) or circles (domain B)
    canvas: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    palette_seed: int = 7
    background_low: float = -0.9
    background_high: float = -0.3

    def __post_init__(self):
        if self.shape_kind not in (SQUARES, CIRCLES):
            raise ValueError(f"unknown shape kind {self.shape_kind!r}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("bad shape-count range")


def _palette(seed, n=8):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.2, 1.0, size=(n, 3))


def sample_scene(spec: SyntheticDomainSpec, seed, index):
    """Deterministic scene description: background color + shape list."""
    domain_code = 0 if spec.shape_kind == SQUARES else 1
    rng = np.random.default_rng([seed, index, domain_code])
    palette = _palette(spec.palette_seed)
    bg = rng.uniform(spec.background_low, spec.background_high, size=3)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    for _ in range(count):
        shapes.append({
            "kind": spec.shape_kind,
            "cx": float(rng.uniform(0.2, 0.8)),
            "cy": float(rng.uniform(0.2, 0.8)),
            "half": float(rng.uniform(0.08, 0.22)),
            "color": palette[int(rng.integers(len(palette)))],
        })
    return {"background": bg, "shapes": shapes}


def render_scene(scene, canvas):
    """Rasterize a scene to a [3, canvas, canvas] tensor in [-1, 1]."""
    dt = T.get_default_dtype()
    img = np.empty((3, canvas, canvas), dtype=dt)
    img[:] = np.asarray(scene["background"], dtype=dt)[:, None, None]
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) / (canvas - 1)
    for shape in scene["shapes"]:
        cx, cy, half = shape["cx"], shape["cy"], shape["half"]
        if shape["kind"] == SQUARES:
            mask = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
        else:
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
        img[:, mask] = np.asarray(shape["color"], dtype=dt)[:, None]
    return np.clip(img, -1.0, 1.0)


def synth_sample(spec: SyntheticDomainSpec, seed, index):
    return render_scene(sample_scene(spec, seed, index), spec.canvas)


class SyntheticDataset:
    """Indexable view over one synthetic domain."""

    def __init__(self, spec: SyntheticDomainSpec, size, seed=0):
        if size < 1:
            raise ValueError("dataset is empty")
        self.spec = spec
        self.size = size
        self.seed = seed

    def __len__(self):
        return self.size

    def __getitem__(self, index):
        return synth_sample(self.spec, self.seed, index)


class FolderDataset:
    """PNG files of one domain directory, resized on load."""

    def __init__(self, directory, resolution=None):
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"no such dataset directory: {directory}")
        self.paths = sorted(
            os.path.join(directory, f) for f in os.listdir(directory)
            if f.lower().endswith(".png"))
        if not self.paths:
            raise ValueError(f"dataset directory {directory} has no .png files")
        self.resolution = resolution

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        return load_image(self.paths[index], resolution=self.resolution)


def epoch_permutation(n, seed, domain_code, epoch):
    """The shuffle of one domain epoch; a pure function of its arguments."""
    return np.random.default_rng([seed, domain_code, epoch]).permutation(n)


def _domain_walker(dataset, seed, domain_code, start_position=0):
    n = len(dataset)
    position = start_position
    cached_epoch, perm = -1, None
    while True:
        epoch, offset = divmod(position, n)
        if epoch != cached_epoch:
            perm = epoch_permutation(n, seed, domain_code, epoch)
            cached_epoch = epoch
        yield dataset[int(perm[offset])]
        position += 1


def unpaired_iterator(domain_a, domain_b, batch=1, seed=0, start_step=0):
    """Endless stream of (xA, yB) batches with independent domain shuffles.

    Each domain walks its own per-epoch permutation (derived from the seed
    and epoch number), so every index appears exactly once per domain epoch
    and the stream can resume from any step.
    """
    if len(domain_a) == 0 or len(domain_b) == 0:
        raise ValueError("both domains must be non-empty")
    walk_a = _domain_walker(domain_a, seed, 0xA, start_position=start_step * batch)
    walk_b = _domain_walker(domain_b, seed, 0xB, start_position=start_step * batch)
    while True:
        xa = np.stack([next(walk_a) for _ in range(batch)])
        yb = np.stack([next(walk_b) for _ in range(batch)])
        yield xa, yb


def domain_array(dataset, limit=None):
    """Materialize a dataset (or its first ``limit`` items) as one array."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    return np.stack([dataset[i] for i in range(n)])
