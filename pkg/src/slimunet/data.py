"""Image preprocessing, augmentation, subject-aware splits and phantom data.

Images travel through the pipeline as float32 arrays of shape ``(1, h, w)``
with values in [0, 1]; masks as uint8 ``(h, w)`` arrays of 0/1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotations import (
    PolygonAnnotation,
    annotations_to_dict,
    expand_to_proposed,
    load_mask_png,
    rasterize,
    save_mask_png,
)
from .autodiff import make_rng

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
FLIP_SUFFIX = "_flip"


@dataclass
class AnnotatedSample:
    image: np.ndarray
    mask: np.ndarray
    subject_id: str
    sample_id: str
    tight_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"image must be (1, h, w), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"{self.sample_id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ"
            )


def check_sample(sample: AnnotatedSample) -> None:
    """Range/binary assertion used at pipeline boundaries."""
    if sample.image.min() < 0 or sample.image.max() > 1:
        raise ValueError(f"{sample.sample_id}: image values outside [0, 1]")
    if not np.all((sample.mask == 0) | (sample.mask == 1)):
        raise ValueError(f"{sample.sample_id}: mask is not binary")


# ---------------------------------------------------------------------------
# resizing


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a 2-D array with half-pixel centres and edge clamping."""
    out_h, out_w = (size, size) if np.isscalar(size) else size
    img = np.asarray(img, dtype=np.float64)
    r0, r1, fr = _bilinear_axis(img.shape[0], out_h)
    c0, c1, fc = _bilinear_axis(img.shape[1], out_w)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp), n_in - 1)


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; output pixel i samples input floor((i + 0.5) * in/out)."""
    out_h, out_w = (size, size) if np.isscalar(size) else size
    mask = np.asarray(mask)
    return mask[_nearest_index(mask.shape[0], out_h)][:, _nearest_index(mask.shape[1], out_w)]


def to_grayscale(raw: np.ndarray) -> np.ndarray:
    """BT.601 luma for RGB(A-less) input, passthrough for single channel."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        return raw.astype(np.float64)
    if raw.ndim == 3 and raw.shape[2] == 1:
        return raw[..., 0].astype(np.float64)
    if raw.ndim == 3 and raw.shape[2] == 3:
        return raw.astype(np.float64) @ np.array(LUMA_WEIGHTS)
    raise ValueError(f"unsupported image shape {raw.shape}: expected gray or 3-channel RGB")


def preprocess(raw: np.ndarray, target_size: int = 128) -> np.ndarray:
    """Gray conversion, bilinear resize to ``target_size``, scale to [0, 1].

    Integer input is divided by 255; float input must already lie in [0, 1].
    Returns float32 of shape ``(1, target_size, target_size)``.
    """
    if target_size < 16 or target_size % 16:
        raise ValueError("target_size must be a positive multiple of 16")
    raw = np.asarray(raw)
    scale = 255.0 if np.issubdtype(raw.dtype, np.integer) else 1.0
    gray = to_grayscale(raw) / scale
    if gray.shape != (target_size, target_size):
        gray = resize_bilinear(gray, target_size)
    return np.clip(gray, 0.0, 1.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# augmentation and splits


def hflip_sample(sample: AnnotatedSample) -> AnnotatedSample:
    tight = None if sample.tight_mask is None else sample.tight_mask[:, ::-1].copy()
    return AnnotatedSample(
        image=sample.image[:, :, ::-1].copy(),
        mask=sample.mask[:, ::-1].copy(),
        subject_id=sample.subject_id,
        sample_id=sample.sample_id + FLIP_SUFFIX,
        tight_mask=tight,
    )


def augment_hflip(samples: list[AnnotatedSample]) -> list[AnnotatedSample]:
    """Originals followed by a horizontally mirrored copy of each."""
    return list(samples) + [hflip_sample(s) for s in samples]


def _subjects(samples):
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.subject_id, []).append(i)
    return groups


def split_train_val(samples: list[AnnotatedSample], val_fraction: float = 0.1, seed: int = 0):
    """Subject-disjoint split with roughly ``val_fraction`` of samples in val.

    Subjects are shuffled with the seed and moved to the validation side one
    at a time while that brings the validation size closer to
    ``round(n * val_fraction)``; at least one subject ends up on each side.
    """
    if not samples:
        raise ValueError("cannot split an empty dataset")
    groups = _subjects(samples)
    if len(groups) < 2:
        raise ValueError("a subject-disjoint split needs at least 2 subjects")
    order = sorted(groups)
    perm = make_rng(seed, "split").permutation(len(order))
    target = round(len(samples) * val_fraction)
    val_subjects, count = [], 0
    for idx in perm[:-1]:
        size = len(groups[order[idx]])
        if val_subjects and abs(count + size - target) >= abs(count - target):
            break
        val_subjects.append(order[idx])
        count += size
    val_set = set(val_subjects)
    train = [s for s in samples if s.subject_id not in val_set]
    val = [s for s in samples if s.subject_id in val_set]
    return train, val


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def split(self, samples, fold: int):
        """``(train, test)`` sample lists for ``fold``."""
        train = [s for s in samples if self.assignments[s.sample_id] != fold]
        test = [s for s in samples if self.assignments[s.sample_id] == fold]
        return train, test


def make_folds(samples: list[AnnotatedSample], k: int = 10, seed: int = 0) -> FoldPlan:
    """Round-robin assignment of shuffled subjects to ``k`` folds."""
    groups = _subjects(samples)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(groups):
        raise ValueError(f"k={k} exceeds the number of subjects ({len(groups)})")
    order = sorted(groups)
    perm = make_rng(seed, "folds").permutation(len(order))
    subject_fold = {order[idx]: pos % k for pos, idx in enumerate(perm)}
    return FoldPlan(k, {s.sample_id: subject_fold[s.subject_id] for s in samples})


def stack(samples: list[AnnotatedSample]):
    """``(images, masks)`` as float32 arrays of shape (n, 1, h, w)."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)[:, None]
    return images, masks


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic bladder-like phantom set.

    Lengths (axes, deformation) are fractions of ``image_size``.
    """

    count: int = 40
    image_size: int = 128
    subjects: int = 10
    semi_axis_range: tuple[float, float] = (0.13, 0.22)
    aspect_range: tuple[float, float] = (0.55, 0.9)
    deform_range: tuple[float, float] = (0.0, 0.12)
    speckle: float = 0.8
    blur_sigma: float = 1.2
    margin_px: int = 3
    vertices: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.subjects < 1:
            raise ValueError("count and subjects must be positive")
        if self.subjects > self.count:
            raise ValueError("more subjects than samples")
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError("image_size must be a positive multiple of 16")
        for name in ("semi_axis_range", "aspect_range", "deform_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ValueError(f"{name} must satisfy 0 <= low < high")
        if not 0 <= self.speckle <= 1:
            raise ValueError("speckle must lie in [0, 1]")
        if self.blur_sigma < 0 or self.margin_px < 0 or self.vertices < 3:
            raise ValueError("invalid blur_sigma, margin_px or vertices")

    def ids(self):
        """``(sample_id, subject_id)`` pairs; subjects get contiguous blocks."""
        return [
            (f"ph{i:04d}", f"subj{i * self.subjects // self.count:03d}")
            for i in range(self.count)
        ]


def fan_mask(size: int) -> np.ndarray:
    """Conical field of view of a curved probe, apex above the top edge."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    apex_x, apex_y = size / 2, -0.15 * size
    r = np.hypot(xx - apex_x, yy - apex_y)
    theta = np.arctan2(xx - apex_x, yy - apex_y)
    return (np.abs(theta) <= np.deg2rad(36)) & (r >= 0.3 * size) & (r <= 1.12 * size)


def _bladder_polygon(spec: PhantomSpec, subj_rng, rng):
    s = spec.image_size
    a = subj_rng.uniform(*spec.semi_axis_range) * s
    aspect = subj_rng.uniform(*spec.aspect_range)
    cx0 = s * (0.5 + subj_rng.uniform(-0.06, 0.06))
    cy0 = s * subj_rng.uniform(0.45, 0.58)
    a *= rng.uniform(0.85, 1.15)
    b = a * aspect * rng.uniform(0.9, 1.1)
    cx = cx0 + rng.uniform(-0.05, 0.05) * s
    cy = cy0 + rng.uniform(-0.04, 0.04) * s
    angle = rng.uniform(-0.35, 0.35)
    amp = rng.uniform(*spec.deform_range)
    lobes = int(rng.integers(2, 5))
    phase = rng.uniform(0, 2 * np.pi)
    t = np.linspace(0, 2 * np.pi, spec.vertices, endpoint=False)
    radial = 1 + amp * np.sin(lobes * t + phase)
    ex, ey = a * np.cos(t) * radial, b * np.sin(t) * radial
    x = cx + ex * np.cos(angle) - ey * np.sin(angle)
    y = cy + ex * np.sin(angle) + ey * np.cos(angle)
    return [(float(px), float(py)) for px, py in zip(np.clip(x, 0, s), np.clip(y, 0, s))]


def _render(spec: PhantomSpec, tight: np.ndarray, fov: np.ndarray, subj_rng, rng) -> np.ndarray:
    s = spec.image_size
    tissue = subj_rng.uniform(0.45, 0.6)
    # slowly varying tissue echogenicity plus a brighter band behind the bladder
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (s, s)), sigma=s / 10)
    texture /= np.abs(texture).max() + 1e-12
    echo = tissue * (1 + 0.25 * texture)
    shadow = ndimage.shift(tight.astype(np.float64), (0.12 * s, 0), order=0)
    echo += 0.15 * np.clip(shadow - tight, 0, 1)
    echo = np.where(tight > 0, rng.uniform(0.05, 0.1), echo)
    if spec.blur_sigma > 0:
        echo = ndimage.gaussian_filter(echo, spec.blur_sigma)
    # fully developed speckle: squared magnitude of a complex Gaussian, mean 1
    g = rng.normal(0, 1, (2, s, s))
    speckle = ndimage.gaussian_filter((g[0] ** 2 + g[1] ** 2) / 2, 0.6)
    speckle /= speckle.mean()
    img = echo * ((1 - spec.speckle) + spec.speckle * speckle) * fov
    return np.round(np.clip(img, 0, 1) * 255) / 255


def generate_phantoms(spec: PhantomSpec):
    """Render ``spec.count`` phantoms; returns ``(samples, annotation_dict)``.

    Each sample's ``mask`` is the tight region expanded by ``spec.margin_px``
    (the boundary-inclusive target); ``tight_mask`` keeps the exact region and
    the annotation dict holds the tight polygons. Every sample draws from its
    own generator keyed by ``(seed, sample_id)``, subjects share shape and
    brightness parameters keyed by ``(seed, subject_id)``.
    """
    fov = fan_mask(spec.image_size)
    samples, annotations = [], []
    for sample_id, subject_id in spec.ids():
        rng = make_rng(spec.seed, "sample", sample_id)
        for _ in range(100):
            subj_rng = make_rng(spec.seed, "subject", subject_id)
            polygon = _bladder_polygon(spec, subj_rng, rng)
            tight = rasterize(polygon, (spec.image_size, spec.image_size))
            if tight.any() and not np.any(tight & ~fov):
                break
        else:  # pragma: no cover - ranges above always fit the fan
            raise RuntimeError(f"could not place a bladder inside the fan for {sample_id}")
        image = _render(spec, tight, fov, subj_rng, rng)
        samples.append(
            AnnotatedSample(
                image=image.astype(np.float32)[None],
                mask=expand_to_proposed(tight, spec.margin_px),
                subject_id=subject_id,
                sample_id=sample_id,
                tight_mask=tight,
            )
        )
        annotations.append(
            PolygonAnnotation(f"{sample_id}.png", (spec.image_size, spec.image_size), polygon)
        )
    return samples, annotations_to_dict(annotations)


def with_masks(samples: list[AnnotatedSample], margin_px: int) -> list[AnnotatedSample]:
    """Copies whose ``mask`` is ``tight_mask`` expanded by ``margin_px``."""
    return [replace(s, mask=expand_to_proposed(s.tight_mask, margin_px)) for s in samples]


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(out_dir, samples, annotations: dict | None = None,
                  fold_plan: FoldPlan | None = None) -> None:
    """images/<id>.png, masks/<id>.png, annotations.json, manifest.csv."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        pixels = np.round(s.image[0].astype(np.float64) * 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out / "images" / f"{s.sample_id}.png")
        save_mask_png(out / "masks" / f"{s.sample_id}.png", s.mask)
    if annotations is not None:
        (out / "annotations.json").write_text(json.dumps(annotations, indent=1))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "subject_id", "fold"])
        for s in samples:
            fold = "" if fold_plan is None else fold_plan.assignments[s.sample_id]
            writer.writerow([s.sample_id, s.subject_id, fold])


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def load_dataset(data_dir, target_size: int = 128) -> list[AnnotatedSample]:
    """Read a dataset directory written by :func:`write_dataset`.

    Without a manifest every image in ``images/`` is its own subject.
    """
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            rows = [(r["sample_id"], r["subject_id"]) for r in csv.DictReader(fh)]
    else:
        rows = [(p.stem, p.stem) for p in sorted((root / "images").glob("*.png"))]
    if not rows:
        raise ValueError(f"no samples found in {root}")
    samples = []
    for sample_id, subject_id in rows:
        image = preprocess(load_image(root / "images" / f"{sample_id}.png"), target_size)
        mask = resize_mask(load_mask_png(root / "masks" / f"{sample_id}.png"), target_size)
        sample = AnnotatedSample(image, mask, subject_id, sample_id)
        check_sample(sample)
        samples.append(sample)
    return samples
