"""Datasets, synthetic domain shift, augmentation and batch iteration.

Target-domain labels travel with the data for evaluation only. Reading
``Dataset.labels`` on a target dataset outside :func:`evaluation_access`
raises :class:`LabelAccessError`, so a training path that peeks at
ground truth fails loudly.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import json
import math
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from hcpr.errors import ConfigError, InputError, LabelAccessError

MANIFEST_VERSION = 1


class Dataset:
    """Immutable image collection with stable integer instance ids."""

    def __init__(self, images, labels=None, ids=None, domain: str = "target", name: str = ""):
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise InputError(f"images must be N x H x W x C, got shape {images.shape}")
        n = len(images)
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,) or len(np.unique(ids)) != n:
            raise InputError("instance ids must be unique, one per image")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise InputError("labels must have one entry per image")
            labels.setflags(write=False)
        if domain not in ("source", "target"):
            raise InputError(f"domain must be 'source' or 'target', got {domain!r}")
        images.setflags(write=False)
        ids.setflags(write=False)
        self.images = images
        self.ids = ids
        self.domain = domain
        self.name = name
        self._labels = labels
        self._eval_depth = 0
        self._position = {int(i): p for p, i in enumerate(ids)}

    def __len__(self):
        return len(self.images)

    def __repr__(self):
        return f"Dataset(name={self.name!r}, domain={self.domain}, n={len(self)}, shape={self.image_shape})"

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise LabelAccessError(f"dataset {self.name!r} carries no labels")
        if self.domain == "target" and self._eval_depth == 0:
            raise LabelAccessError(
                f"target labels of {self.name!r} are evaluation-only; wrap the read in evaluation_access()"
            )
        return self._labels

    def positions(self, ids) -> np.ndarray:
        return np.array([self._position[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.images[positions],
            None if self._labels is None else self._labels[positions],
            self.ids[positions],
            self.domain,
            self.name,
        )


@contextlib.contextmanager
def evaluation_access(*datasets: Dataset):
    """Allow reading target labels for the duration of the block."""
    for ds in datasets:
        ds._eval_depth += 1
    try:
        yield
    finally:
        for ds in datasets:
            ds._eval_depth -= 1


class ShiftSpec(BaseModel):
    """Recipe for a synthetic source/target pair.

    Motif mode composes each class from a fixed subset of small stroke
    motifs placed at random positions, so class identity lives in local
    parts. Glyph mode renders one class-specific stroke figure. In both,
    the target shift rotates, rescales, thickens and re-colours strokes
    and can add clutter. Tabular mode draws Gaussian blobs and moves the
    target means.
    """

    model_config = ConfigDict(extra="forbid")

    mode: Literal["motif", "glyph", "tabular"] = "motif"
    num_classes: int = Field(10, ge=2)
    source_per_class: int | list[int] = 100
    target_per_class: int | list[int] = 100
    image_size: int = Field(16, ge=8)
    strokes_per_class: int = Field(3, ge=1)
    glyph_seed: int = 0
    # motif mode: each class is a fixed subset of a shared motif library
    motif_count: int = Field(12, ge=2)
    motifs_per_class: int = Field(2, ge=1)
    motif_size: float = 6.0
    # extra motifs outside the class's own subset, drawn per image
    distractor_motifs: int = Field(0, ge=0)
    # per-sample nuisance shared by both domains
    jitter_px: float = 1.0
    rotation_jitter_deg: float = 10.0
    noise_std: float = 0.05
    stroke_width: float = 0.9
    # target shift
    rotation_deg: float = 0.0
    translate_px: float = 0.0
    scale: float = 1.0
    target_stroke_width: float | None = None
    contrast: float = 1.0
    brightness: float = 0.0
    clutter_strokes: int = 0
    target_noise_std: float | None = None
    # tabular mode
    dim: int = Field(8, ge=1)
    class_separation: float = 3.0
    mean_offset: float = 0.0
    cov_scale: float = 1.0

    def counts(self, which: str) -> list[int]:
        raw = self.source_per_class if which == "source" else self.target_per_class
        counts = [raw] * self.num_classes if isinstance(raw, int) else list(raw)
        if len(counts) != self.num_classes:
            raise ConfigError(f"{which}_per_class needs {self.num_classes} entries, got {len(counts)}")
        if min(counts) < 1:
            raise ConfigError(f"{which}_per_class: every class needs at least one sample")
        return counts


def _glyphs(spec: ShiftSpec) -> np.ndarray:
    """Segment endpoints per class, shape C x S x 2 x 2, in unit square coordinates."""
    rng = np.random.default_rng(spec.glyph_seed)
    return rng.uniform(0.2, 0.8, size=(spec.num_classes, spec.strokes_per_class, 2, 2))


def _render(segments: np.ndarray, size: int, width: np.ndarray) -> np.ndarray:
    """Render N glyphs (N x S x 2 x 2 endpoints in pixel units) as N x size x size images."""
    coords = np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="ij"), -1).reshape(-1, 2)
    p = coords[None, None, :, :].astype(np.float64)  # 1 x 1 x P x 2
    a = segments[:, :, None, 0, :]  # N x S x 1 x 2
    b = segments[:, :, None, 1, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-9), 0.0, 1.0)
    closest = a + t[..., None] * ab
    d2 = ((p - closest) ** 2).sum(-1).min(axis=1)  # N x P
    img = np.exp(-d2 / (2.0 * width[:, None] ** 2))
    return img.reshape(-1, size, size)


# Two-stroke motifs in a unit box centred on the origin, (y, x) endpoints.
# Equal stroke counts keep the amount of ink comparable across classes.
MOTIFS = {
    "plus": [((0, -1), (0, 1)), ((-1, 0), (1, 0))],
    "cross": [((1, -1), (-1, 1)), ((-1, -1), (1, 1))],
    "equals": [((-0.5, -1), (-0.5, 1)), ((0.5, -1), (0.5, 1))],
    "pillars": [((-1, -0.5), (1, -0.5)), ((-1, 0.5), (1, 0.5))],
    "corner": [((-1, -1), (-1, 1)), ((-1, -1), (1, -1))],
    "elbow": [((1, -1), (1, 1)), ((-1, 1), (1, 1))],
    "tee": [((-1, -1), (-1, 1)), ((-1, 0), (1, 0))],
    "bottom_tee": [((1, -1), (1, 1)), ((-1, 0), (1, 0))],
    "caret": [((1, -1), (-1, 0)), ((-1, 0), (1, 1))],
    "vee": [((-1, -1), (1, 0)), ((1, 0), (-1, 1))],
    "less": [((-1, 1), (0, -1)), ((0, -1), (1, 1))],
    "greater": [((-1, -1), (0, 1)), ((0, 1), (1, -1))],
}


def _motif_library(spec: ShiftSpec):
    """Motif strokes (P x S x 2 x 2, centred, pixel units) and each class's motif subset."""
    if spec.motif_count > len(MOTIFS):
        raise ConfigError(f"motif_count {spec.motif_count} exceeds the {len(MOTIFS)} available motifs")
    width = max(len(v) for v in MOTIFS.values())
    motifs = np.zeros((spec.motif_count, width, 2, 2))
    for j, strokes in enumerate(list(MOTIFS.values())[: spec.motif_count]):
        # pad by repeating the first stroke so every motif has `width` segments
        padded = strokes + [strokes[0]] * (width - len(strokes))
        motifs[j] = np.array(padded, dtype=np.float64) * spec.motif_size / 2.0
    rng = np.random.default_rng(spec.glyph_seed)
    limit = math.comb(spec.motif_count, spec.motifs_per_class)
    if spec.num_classes > limit:
        raise ConfigError(
            f"{spec.num_classes} classes need more than the {limit} distinct "
            f"{spec.motifs_per_class}-of-{spec.motif_count} motif subsets"
        )
    subsets = set()
    classes = []
    while len(classes) < spec.num_classes:
        pick = tuple(sorted(rng.choice(spec.motif_count, size=spec.motifs_per_class, replace=False).tolist()))
        if pick not in subsets:
            subsets.add(pick)
            classes.append(pick)
    return motifs, np.array(classes)


def _distractor_options(spec: ShiftSpec, classes: np.ndarray) -> list[np.ndarray]:
    """Per class, the distractor motif combinations that do not complete any other class's subset."""
    subsets = [set(c.tolist()) for c in classes]
    out = []
    for c, own in enumerate(subsets):
        rest = [j for j in range(spec.motif_count) if j not in own]
        ok = [
            combo for combo in itertools.combinations(rest, spec.distractor_motifs)
            if not any(o <= own | set(combo) for k, o in enumerate(subsets) if k != c)
        ]
        if not ok:
            raise ConfigError(f"class {c}: no distractor motifs leave the image unambiguous")
        out.append(np.array(ok, dtype=np.int64))
    return out


def _motif_segments(spec: ShiftSpec, labels, rng, angle):
    """Place each class's motifs in distinct cells of a jittered grid; rotate each motif by ``angle``."""
    motifs, classes = _motif_library(spec)
    n, size = len(labels), spec.image_size
    picked = classes[labels]  # N x motifs_per_class
    if spec.distractor_motifs:
        options = _distractor_options(spec, classes)
        draw = rng.random(n)
        extra = np.stack([options[c][int(u * len(options[c]))] for c, u in zip(labels, draw)])
        picked = np.concatenate([picked, extra], axis=1)
    m = picked.shape[1]
    cells = int(math.ceil(math.sqrt(max(m, 2))))
    pitch = size / cells
    slot = np.argsort(rng.random((n, cells * cells)), axis=1)[:, :m]
    cy = (slot // cells + 0.5) * pitch - 0.5
    cx = (slot % cells + 0.5) * pitch - 0.5
    centre = np.stack([cy, cx], -1) + rng.normal(0.0, spec.jitter_px, size=(n, m, 2))  # N x m x 2
    local = motifs[picked]  # N x m x S x 2 x 2
    local = local + rng.normal(0.0, spec.jitter_px * 0.5, size=local.shape)
    a = angle[:, None] + np.deg2rad(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg, (n, m)))
    cos, sin = np.cos(a), np.sin(a)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)  # N x m x 2 x 2
    local = np.einsum("nmij,nmsej->nmsei", rot, local)
    segs = local + centre[:, :, None, None, :]
    return segs.reshape(n, -1, 2, 2)


def _image_domain(spec: ShiftSpec, counts, rng, shifted: bool):
    C, size = spec.num_classes, spec.image_size
    labels = np.repeat(np.arange(C), counts)
    n = len(labels)
    if spec.mode == "motif":
        motif_angle = np.full(n, np.deg2rad(spec.rotation_deg) if shifted else 0.0)
        segs = _motif_segments(spec, labels, rng, motif_angle)
        angle = np.zeros(n)
    else:
        glyphs = _glyphs(spec)[labels] * (size - 1)  # N x S x 2 x 2, pixel units
        segs = glyphs + rng.normal(0.0, spec.jitter_px, size=glyphs.shape)
        angle = np.deg2rad(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg, n))
        if shifted:
            angle = angle + np.deg2rad(spec.rotation_deg)

    scale = np.ones(n)
    offset = np.zeros((n, 2))
    width = np.full(n, spec.stroke_width) * rng.uniform(0.85, 1.15, n)
    noise = spec.noise_std
    if shifted:
        scale = scale * spec.scale
        offset = offset + spec.translate_px
        if spec.target_stroke_width is not None:
            width = width * spec.target_stroke_width / spec.stroke_width
        if spec.target_noise_std is not None:
            noise = spec.target_noise_std
    centre = (size - 1) / 2.0
    cos, sin = np.cos(angle), np.sin(angle)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)  # N x 2 x 2
    segs = np.einsum("nij,nsej->nsei", rot, segs - centre) * scale[:, None, None, None]
    segs = segs + centre + offset[:, None, None, :]

    img = _render(segs, size, width)
    if shifted and spec.clutter_strokes:
        clutter = rng.uniform(0, size - 1, size=(n, spec.clutter_strokes, 2, 2))
        img = np.maximum(img, 0.6 * _render(clutter, size, np.full(n, spec.stroke_width)))
    if shifted:
        img = spec.contrast * img + spec.brightness
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[..., None].astype(np.float32), labels


def _tabular_domain(spec: ShiftSpec, counts, rng, means, shifted: bool):
    labels = np.repeat(np.arange(spec.num_classes), counts)
    centres = means[labels] + (spec.mean_offset if shifted else 0.0)
    std = math.sqrt(spec.cov_scale) if shifted else 1.0
    x = centres + std * rng.standard_normal((len(labels), spec.dim))
    return x[:, None, None, :].astype(np.float32), labels


def make_synthetic_shift(spec: ShiftSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Generate a labelled source domain and a shifted target domain."""
    src_counts, tgt_counts = spec.counts("source"), spec.counts("target")
    src_rng, tgt_rng, perm_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if spec.mode in ("motif", "glyph"):
        xs, ys = _image_domain(spec, src_counts, src_rng, shifted=False)
        xt, yt = _image_domain(spec, tgt_counts, tgt_rng, shifted=True)
    else:
        means = np.random.default_rng(spec.glyph_seed).standard_normal((spec.num_classes, spec.dim))
        means *= spec.class_separation
        xs, ys = _tabular_domain(spec, src_counts, src_rng, means, shifted=False)
        xt, yt = _tabular_domain(spec, tgt_counts, tgt_rng, means, shifted=True)
    ps, pt = perm_rng.permutation(len(xs)), perm_rng.permutation(len(xt))
    source = Dataset(xs[ps], ys[ps], domain="source", name="synthetic-source")
    target = Dataset(xt[pt], yt[pt], domain="target", name="synthetic-target")
    return source, target


# ---------------------------------------------------------------- augmentation

STRONG_OPS = (
    "autocontrast",
    "brightness",
    "contrast",
    "equalize",
    "posterize",
    "rotate",
    "sharpness",
    "shear_x",
    "shear_y",
    "solarize",
    "translate_x",
    "translate_y",
)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic image transform; ``kind`` is 'weak' (flip + shift) or 'strong'.

    Every strong op is the identity at magnitude 0. Magnitudes are drawn
    uniformly from [0, max_magnitude] per op per call. Output is clipped to
    ``clip``.
    """

    kind: Literal["weak", "strong"] = "weak"
    flip_prob: float = 0.5
    max_shift_frac: float = 0.125
    n_ops: int = 2
    max_magnitude: float = 1.0
    cutout_frac: float = 0.5
    ops: tuple[str, ...] = field(default=STRONG_OPS)
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        unknown = set(self.ops) - set(STRONG_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation ops: {sorted(unknown)}")

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "weak":
            return weak_augment(image, rng, self)
        return strong_augment(image, rng, self)


WEAK = AugmentationPolicy("weak")
STRONG = AugmentationPolicy("strong")


def _check_image(image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise InputError(f"image must be H x W x C, got shape {image.shape}")
    return image


def flip_shift(image: np.ndarray, flip: bool, dy: int, dx: int) -> np.ndarray:
    """Horizontal flip then integer translation with reflect padding."""
    out = image[:, ::-1] if flip else image
    if dy or dx:
        h, w = image.shape[:2]
        pad = max(abs(dy), abs(dx))
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        out = padded[pad - dy : pad - dy + h, pad - dx : pad - dx + w]
    return np.ascontiguousarray(out)


def weak_augment(image, rng: np.random.Generator, policy: AugmentationPolicy = WEAK) -> np.ndarray:
    image = _check_image(image)
    h, w = image.shape[:2]
    flip = bool(rng.random() < policy.flip_prob)
    max_dy = min(int(round(policy.max_shift_frac * h)), h - 1)
    max_dx = min(int(round(policy.max_shift_frac * w)), w - 1)
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    return flip_shift(image, flip, dy, dx)


def _affine(image, matrix):
    h, w = image.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    return np.stack(
        [ndimage.affine_transform(image[..., c], matrix, offset, order=1, mode="constant") for c in range(image.shape[2])],
        -1,
    )


def apply_op(image: np.ndarray, op: str, m: float, sign: float = 1.0) -> np.ndarray:
    """Apply one strong op at magnitude ``m`` in [0, 1]; m == 0 returns the input unchanged."""
    if m == 0.0:
        return image
    lo, hi = float(image.min()), float(image.max())
    mean = float(image.mean())
    if op == "autocontrast":
        stretched = (image - lo) / (hi - lo) if hi > lo else image
        return (1 - m) * image + m * stretched
    if op == "brightness":
        return image * (1.0 + sign * 0.9 * m)
    if op == "contrast":
        return mean + (image - mean) * (1.0 + sign * 0.9 * m)
    if op == "equalize":
        flat = image.reshape(-1)
        ranks = np.argsort(np.argsort(flat, kind="stable"), kind="stable")
        eq = (ranks / max(len(flat) - 1, 1)).reshape(image.shape)
        return (1 - m) * image + m * eq
    if op == "posterize":
        bits = 8 - int(round(4 * m))
        if bits >= 8:
            return image
        levels = 2**bits - 1
        return np.floor(np.clip(image, 0, 1) * levels + 0.5) / levels
    if op == "rotate":
        a = np.deg2rad(sign * 30.0 * m)
        return _affine(image, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))
    if op == "sharpness":
        blurred = np.stack([ndimage.uniform_filter(image[..., c], 3) for c in range(image.shape[2])], -1)
        return image + sign * 0.9 * m * (image - blurred)
    if op == "shear_x":
        return _affine(image, np.array([[1.0, 0.0], [sign * 0.3 * m, 1.0]]))
    if op == "shear_y":
        return _affine(image, np.array([[1.0, sign * 0.3 * m], [0.0, 1.0]]))
    if op == "solarize":
        threshold = 1.0 - m
        return np.where(image > threshold, 1.0 - image, image)
    if op in ("translate_x", "translate_y"):
        h, w = image.shape[:2]
        shift = [0.0, 0.0, 0.0]
        axis = 1 if op == "translate_x" else 0
        shift[axis] = sign * 0.3 * m * (w if axis == 1 else h)
        return ndimage.shift(image, shift, order=1, mode="constant")
    raise ConfigError(f"unknown op {op!r}")


def cutout(image: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Erase a square of side ``frac * min(H, W)`` to the clip floor (0)."""
    h, w = image.shape[:2]
    side = int(round(frac * min(h, w)))
    if side <= 0:
        return image
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    out = image.copy()
    out[max(cy - side // 2, 0) : cy + (side + 1) // 2, max(cx - side // 2, 0) : cx + (side + 1) // 2] = 0.0
    return out


def strong_augment(image, rng: np.random.Generator, policy: AugmentationPolicy = STRONG) -> np.ndarray:
    """Weak flip/shift, then ``n_ops`` random distortions, then cutout."""
    out = weak_augment(image, rng, policy).astype(np.float64)
    chosen = rng.choice(len(policy.ops), size=min(policy.n_ops, len(policy.ops)), replace=False)
    for i in chosen:
        m = float(rng.uniform(0.0, policy.max_magnitude))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = apply_op(out, policy.ops[i], m, sign)
    if policy.cutout_frac > 0:
        out = cutout(out, float(rng.uniform(0.0, policy.cutout_frac)), rng)
    return np.clip(out, *policy.clip).astype(np.float32)


def augment_batch(images: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> np.ndarray:
    return np.stack([policy(img, rng) for img in images])


# ---------------------------------------------------------------- batching


def batches(dataset, batch_size: int, rng: np.random.Generator, drop_last: bool = False) -> Iterator[np.ndarray]:
    """One epoch of shuffled position batches over ``dataset`` (a Dataset or a length)."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if drop_last and batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n} with drop_last")
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


# ---------------------------------------------------------------- manifests


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(dataset: Dataset, directory, name: str | None = None) -> Path:
    """Write ``<name>.npy`` (packed images) and ``<name>.manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or dataset.domain
    payload = directory / f"{name}.npy"
    np.save(payload, dataset.images)
    with evaluation_access(dataset):
        labels = dataset.labels.tolist() if dataset.has_labels else [None] * len(dataset)
    records = [
        {"id": int(i), "row": row, "label": lab, "domain": dataset.domain}
        for row, (i, lab) in enumerate(zip(dataset.ids.tolist(), labels))
    ]
    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": dataset.name,
        "payload": payload.name,
        "sha256": _sha256(payload),
        "image_shape": list(dataset.image_shape),
        "records": records,
    }
    path = directory / f"{name}.manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path, verify: bool = True) -> Dataset:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise InputError(f"{path}: unsupported manifest version {manifest.get('format_version')!r}")
    payload = path.parent / manifest["payload"]
    if verify and _sha256(payload) != manifest["sha256"]:
        raise InputError(f"{payload}: checksum mismatch")
    images = np.load(payload)
    records = manifest["records"]
    rows = np.array([r["row"] for r in records], dtype=np.int64)
    labels = [r["label"] for r in records]
    domains = {r["domain"] for r in records}
    if len(domains) != 1:
        raise InputError(f"{path}: mixed domains {sorted(domains)}")
    return Dataset(
        images[rows],
        None if any(lab is None for lab in labels) else labels,
        [r["id"] for r in records],
        domains.pop(),
        manifest.get("name", ""),
    )


def fetch_with_checksum(url: str, dest, sha256: str, timeout: float = 30.0) -> Path:
    """Download ``url`` to ``dest`` unless a file with the right checksum is already there."""
    dest = Path(dest)
    if dest.exists() and _sha256(dest) == sha256:
        return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
        fh.write(resp.read())
    if _sha256(tmp) != sha256:
        tmp.unlink()
        raise InputError(f"checksum mismatch for {url}")
    tmp.replace(dest)
    return dest


def digits_pair(seed: int = 0, image_size: int = 16, rotation_deg: float = 20.0, thicken: int = 1):
    """Small real-image pair from scikit-learn's bundled 8x8 digits.

    Source is the upsampled digits; target is rotated, stroke-thickened
    and contrast-reduced. Offline: nothing is downloaded.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    x = digits.images / 16.0
    y = digits.target
    zoom = image_size / 8.0
    x = np.stack([ndimage.zoom(img, zoom, order=1) for img in x])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    half = len(x) // 2
    src, tgt = perm[:half], perm[half:]
    xt = x[tgt]
    if thicken:
        xt = np.stack([ndimage.grey_dilation(img, size=(1 + thicken, 1 + thicken)) for img in xt])
    xt = np.stack([ndimage.rotate(img, rotation_deg, reshape=False, order=1) for img in xt])
    xt = 0.2 + 0.6 * xt
    xs = np.clip(x[src], 0, 1)[..., None].astype(np.float32)
    xt = np.clip(xt, 0, 1)[..., None].astype(np.float32)
    return (
        Dataset(xs, y[src], domain="source", name="digits-source"),
        Dataset(xt, y[tgt], domain="target", name="digits-target"),
    )
