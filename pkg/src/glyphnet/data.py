"""Image ingestion, preprocessing, augmentation, fold planning, synthesis.

The on-disk contract is a directory of PNGs per class
(``<root>/Normal/*.png`` etc.).  Every image becomes a 1x32x32 float tensor
in [0, 1]; a synthetic mirrored-glyph generator provides desk-scale data in
the same layout.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import (
    CorruptImage,
    EmptyClass,
    InvalidConfig,
    InvalidK,
    MissingClassDir,
    TooFewSamples,
)
from .tensor import DTYPE, Tensor

__all__ = [
    "Sample",
    "Dataset",
    "FoldPlan",
    "AugmentConfig",
    "DEFAULT_CLASS_MAP",
    "decode_image",
    "preprocess",
    "bilinear_resize",
    "augment",
    "derive_rng",
    "stratified_kfold",
    "load_dataset",
    "synth_glyphs",
    "write_dataset_png",
]

DEFAULT_CLASS_MAP = {"Normal": 0, "Reversed": 1, "Corrected": 2}

IMAGE_SIZE = 32

_SEED_MASK = (1 << 64) - 1


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers."""
    entropy = [int(k) & _SEED_MASK for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# core types


@dataclass
class Sample:
    """One preprocessed image with its class index and provenance tag."""

    image: Tensor  # (1, 32, 32) float32 in [0, 1]
    label: int
    source_id: str


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    counts: list[int]
    skipped: list[dict] = field(default_factory=list)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FoldPlan:
    """Disjoint stratified partition: assignments[i] is sample i's fold."""

    k: int
    assignments: np.ndarray
    seed: int

    def val_indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignments == fold)[0]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignments != fold)[0]


@dataclass
class AugmentConfig:
    """Training-time augmentation ranges.

    ``flip_prob`` defaults to 0: a horizontal flip turns a Normal glyph into
    a Reversed one without relabeling, so enabling it poisons supervision
    for this task.  It stays available for datasets where orientation is not
    label-bearing.
    """

    rotation_max_deg: float = 15.0
    flip_prob: float = 0.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.zoom_range
        if self.rotation_max_deg < 0:
            raise InvalidConfig("rotation_max_deg must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip_prob must be in [0, 1]")
        if not 0.0 < lo <= hi:
            raise InvalidConfig(f"zoom_range must satisfy 0 < lo <= hi, got {self.zoom_range}")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be >= 0")


# ---------------------------------------------------------------------------
# decoding and preprocessing


def decode_image(data: bytes) -> np.ndarray:
    """Decode a PNG byte stream to an 8-bit H x W x C grid (C of 1 or 3).

    Alpha, when present, is composited over white.
    """
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise CorruptImage(f"not a decodable PNG: {e}") from None

    if img.mode == "P":
        img = img.convert("RGBA")
    if img.mode in ("RGBA", "LA", "PA"):
        background = Image.new("RGBA", img.size, (255, 255, 255, 255))
        img = Image.alpha_composite(background, img.convert("RGBA")).convert("RGB")
    elif img.mode not in ("L", "RGB"):
        img = img.convert("RGB")

    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-d grid."""
    h, w = grid.shape
    grid = grid.astype(DTYPE)
    src_r = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    src_c = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0).astype(DTYPE)[:, None]
    fc = (src_c - c0).astype(DTYPE)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bottom = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    return (top * (1 - fr) + bottom * fr).astype(DTYPE)


def preprocess(pixels: np.ndarray) -> Tensor:
    """Raw 8-bit pixels -> grayscale, [0, 1], bilinear-resized to 32x32."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxWxC pixels with C in {{1,3}}, got {arr.shape}")
    arr = arr.astype(DTYPE)
    if arr.shape[2] == 3:
        gray = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    else:
        gray = arr[:, :, 0]
    gray = gray / DTYPE(255.0)
    if gray.shape != (IMAGE_SIZE, IMAGE_SIZE):
        gray = bilinear_resize(gray, IMAGE_SIZE, IMAGE_SIZE)
    return Tensor(np.clip(gray, 0.0, 1.0)[None].astype(DTYPE))


# ---------------------------------------------------------------------------
# augmentation


def _affine_sample(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray,
                   fill: float) -> np.ndarray:
    """Bilinear gather at fractional source coords; out of bounds reads fill."""
    h, w = img.shape
    padded = np.full((h + 2, w + 2), fill, dtype=DTYPE)
    padded[1:-1, 1:-1] = img
    pr = np.clip(src_r + 1.0, 0.0, h + 1.0)
    pc = np.clip(src_c + 1.0, 0.0, w + 1.0)
    r0 = np.floor(pr).astype(np.intp)
    c0 = np.floor(pc).astype(np.intp)
    r1 = np.minimum(r0 + 1, h + 1)
    c1 = np.minimum(c0 + 1, w + 1)
    fr = (pr - r0).astype(DTYPE)
    fc = (pc - c0).astype(DTYPE)
    top = padded[r0, c0] * (1 - fc) + padded[r0, c1] * fc
    bottom = padded[r1, c0] * (1 - fc) + padded[r1, c1] * fc
    return (top * (1 - fr) + bottom * fr).astype(DTYPE)


def _rotate(img: np.ndarray, degrees: float, fill: float = 1.0) -> np.ndarray:
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    rows, cols = np.indices((h, w), dtype=DTYPE)
    rel_r, rel_c = rows - cy, cols - cx
    src_r = cos * rel_r + sin * rel_c + cy
    src_c = -sin * rel_r + cos * rel_c + cx
    return _affine_sample(img, src_r, src_c, fill)


def _zoom(img: np.ndarray, factor: float, fill: float = 1.0) -> np.ndarray:
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.indices((h, w), dtype=DTYPE)
    src_r = (rows - cy) / factor + cy
    src_c = (cols - cx) / factor + cx
    return _affine_sample(img, src_r, src_c, fill)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Rotate, maybe flip, zoom, then add Gaussian noise (in that order).

    Resampling is bilinear with white (1.0) fill; the label is untouched.
    The caller supplies a per-sample generator so results are independent of
    iteration order (see :func:`derive_rng`).
    """
    img = sample.image.data[0]
    angle = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    do_flip = bool(rng.random() < cfg.flip_prob)
    factor = float(rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1]))

    if angle != 0.0:
        img = _rotate(img, angle)
    if do_flip:
        img = img[:, ::-1].copy()
    if factor != 1.0:
        img = _zoom(img, factor)
    if cfg.noise_sigma > 0.0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=img.shape).astype(DTYPE)
        img = np.clip(img + noise, 0.0, 1.0)
    return Sample(Tensor(np.ascontiguousarray(img)[None]), sample.label, sample.source_id)


# ---------------------------------------------------------------------------
# fold planning


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> FoldPlan:
    """Shuffle each class once, then deal its indices round-robin to folds."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise InvalidK(f"need at least 2 folds, got {k}")
    rng = derive_rng(seed)
    assignments = np.full(labels.shape[0], -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if idx.size < k:
            raise TooFewSamples(f"class {cls} has {idx.size} samples, needs >= {k}")
        perm = rng.permutation(idx)
        assignments[perm] = np.arange(perm.size) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


# ---------------------------------------------------------------------------
# directory loading


def load_dataset(root, class_map: Mapping[str, int] | None = None) -> Dataset:
    """Load every decodable PNG under one subdirectory per class.

    Undecodable files are skipped and reported in ``Dataset.skipped``;
    ordering is lexicographic by path so loads are reproducible.
    """
    root = Path(root)
    class_map = dict(class_map) if class_map else dict(DEFAULT_CLASS_MAP)
    if sorted(class_map.values()) != list(range(len(class_map))):
        raise InvalidConfig(f"class indices must be 0..{len(class_map) - 1}, got {class_map}")
    by_index = sorted(class_map.items(), key=lambda kv: kv[1])
    class_names = [name for name, _ in by_index]

    entries: list[tuple[Path, int]] = []
    for name, label in by_index:
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingClassDir(f"missing class directory: {class_dir}")
        entries.extend((p, label) for p in class_dir.glob("*.png"))
    entries.sort(key=lambda e: str(e[0]))

    samples: list[Sample] = []
    skipped: list[dict] = []
    counts = [0] * len(class_names)
    for path, label in entries:
        try:
            pixels = decode_image(path.read_bytes())
        except CorruptImage as e:
            skipped.append({"path": str(path), "error": str(e)})
            continue
        samples.append(Sample(preprocess(pixels), label, str(path)))
        counts[label] += 1

    for name, label in by_index:
        if counts[label] == 0:
            raise EmptyClass(f"class directory {root / name} has no decodable PNGs")
    return Dataset(samples, class_names, counts, skipped)


# ---------------------------------------------------------------------------
# synthetic glyphs


def _segment_alpha(rows, cols, r0, c0, r1, c1, thickness):
    # distance from each pixel to the segment, soft-edged at ~half a pixel
    dr, dc = r1 - r0, c1 - c0
    length_sq = dr * dr + dc * dc
    if length_sq == 0:
        d = np.hypot(rows - r0, cols - c0)
    else:
        t = np.clip(((rows - r0) * dr + (cols - c0) * dc) / length_sq, 0.0, 1.0)
        d = np.hypot(rows - (r0 + t * dr), cols - (c0 + t * dc))
    return np.clip(thickness / 2.0 + 0.5 - d, 0.0, 1.0)


def _ring_alpha(rows, cols, cy, cx, radius, thickness):
    d = np.abs(np.hypot(rows - cy, cols - cx) - radius)
    return np.clip(thickness / 2.0 + 0.5 - d, 0.0, 1.0)


def _render_glyph(params: dict, with_artifact: bool) -> np.ndarray:
    """Draw a 'b'-like glyph: vertical stem plus a bowl on the right.

    The corrected variant keeps a fainter left-side ghost bowl, the residue
    of a reversal that was corrected.
    """
    rows, cols = np.indices((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    t = params["thickness"]
    cx = params["cx"]
    alpha = _segment_alpha(rows, cols, params["top"], cx, params["bottom"], cx, t)
    bowl_cy = params["bottom"] - params["radius"]
    alpha = np.maximum(
        alpha, _ring_alpha(rows, cols, bowl_cy, cx + params["radius"], params["radius"], t)
    )
    if with_artifact:
        ghost = _ring_alpha(
            rows, cols, bowl_cy, cx - 0.9 * params["radius"],
            0.8 * params["radius"], 0.8 * t,
        )
        alpha = np.maximum(alpha, params["ghost_strength"] * ghost)
    img = 1.0 - 0.92 * alpha
    # quantize to the 8-bit grid so a PNG round trip is lossless
    return (np.round(img * 255.0) / 255.0).astype(DTYPE)


def _draw_params(rng: np.random.Generator) -> dict:
    return {
        "cx": 11.0 + rng.uniform(-2.0, 2.0),
        "top": 4.5 + rng.uniform(0.0, 2.0),
        "bottom": 25.5 + rng.uniform(0.0, 1.5),
        "thickness": rng.uniform(1.6, 2.6),
        "radius": rng.uniform(4.2, 5.6),
        "ghost_strength": rng.uniform(0.5, 0.75),
    }


def synth_glyphs(n_per_class: int, seed: int) -> Dataset:
    """Generate a three-class mirrored-glyph dataset at 32x32.

    Class 0 is the canonical orientation, class 1 its exact horizontal
    mirror (same per-index jitter), class 2 the canonical orientation with
    a residual ghost stroke left over from correction.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = derive_rng(seed)
    class_names = ["Normal", "Reversed", "Corrected"]
    normal, reversed_, corrected = [], [], []
    for i in range(n_per_class):
        params = _draw_params(rng)
        base = _render_glyph(params, with_artifact=False)
        normal.append(base)
        reversed_.append(np.ascontiguousarray(base[:, ::-1]))
        corrected.append(_render_glyph(_draw_params(rng), with_artifact=True))

    samples = []
    for label, (name, images) in enumerate(
        zip(class_names, (normal, reversed_, corrected))
    ):
        for i, img in enumerate(images):
            samples.append(Sample(Tensor(img[None]), label, f"synth:{name}:{i:04d}"))
    return Dataset(samples, class_names, [n_per_class] * 3)


def write_dataset_png(dataset: Dataset, out_dir) -> list[Path]:
    """Write the dataset as the class-directory PNG tree load_dataset reads."""
    out_dir = Path(out_dir)
    written = []
    counters = [0] * len(dataset.class_names)
    for sample in dataset.samples:
        name = dataset.class_names[sample.label]
        class_dir = out_dir / name
        class_dir.mkdir(parents=True, exist_ok=True)
        idx = counters[sample.label]
        counters[sample.label] += 1
        path = class_dir / f"{name.lower()}_{idx:05d}.png"
        arr = np.round(sample.image.data[0] * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
        written.append(path)
    return written
