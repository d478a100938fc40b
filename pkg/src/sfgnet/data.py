"""Deterministic synthetic two-task datasets, their binary file format and a batch loader.

Two generators are provided:

``faces``
    RGB images with one textured ellipse. The ellipse size encodes a latent
    ``a`` in [0, 1] (regression target) and the stripe frequency encodes a
    binary class. Both tasks need to find the ellipse first.
``scans``
    Single-channel images with three non-overlapping discs. The label map
    marks background / class 1 / class 2, and the dense regression target is
    a fixed nonlinear remap of each region's clean intensity.

Every example is drawn from its own RNG substream keyed by ``(seed, index)``,
so datasets are prefix-stable and can be generated in any order.

File layout (all little-endian)::

    "SFGD"            4 bytes magic
    u32               format version (1)
    u32               generator version
    u32               kind (0 = faces, 1 = scans)
    u64               seed
    f64               value range of the regression target (used by PSNR)
    3 x section       images (f64), target_reg (f64), target_cls (i32)

    section := u32 ndim, ndim x u64 dims, raw array bytes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

MAGIC = b"SFGD"
FORMAT_VERSION = 1
GENERATOR_VERSION = 1
KINDS = ("faces", "scans")
PIXEL_NOISE = 0.05

# faces: ellipse semi-axis range at 32 px, class stripe frequencies (cycles / px)
FACE_RADIUS = (4.0, 12.0)
FACE_FREQ = (0.10, 0.30)
# scans: disc radius range at 32 px, clean intensity bands per class
SCAN_RADIUS = (3.0, 6.0)
SCAN_BANDS = {0: (0.05, 0.15), 1: (0.30, 0.55), 2: (0.65, 0.90)}

_HEADER = struct.Struct("<4sIIIQd")


class DatasetFormatError(ValueError):
    pass


@dataclass
class SynthTaskPair:
    images: np.ndarray
    target_reg: np.ndarray
    target_cls: np.ndarray
    seed: int
    kind: str
    version: int = GENERATOR_VERSION
    value_range: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        n = len(self.images)
        if len(self.target_reg) != n or len(self.target_cls) != n:
            raise ValueError("images and targets disagree in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dense(self) -> bool:
        return self.kind == "scans"

    @property
    def num_classes(self) -> int:
        return 2 if self.kind == "faces" else 3

    def subset(self, idx) -> "SynthTaskPair":
        return SynthTaskPair(self.images[idx], self.target_reg[idx], self.target_cls[idx],
                             self.seed, self.kind, self.version, self.value_range)


def _example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, GENERATOR_VERSION]))


def _check_shape(n: int, h: int, w: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if h < 8 or w < 8:
        raise ValueError(f"images must be at least 8x8, got {h}x{w}")


def face_radius(a: float, h: int, w: int) -> float:
    """Major semi-axis (pixels) of the ellipse encoding latent ``a``."""
    lo, hi = FACE_RADIUS
    return (lo + a * (hi - lo)) * min(h, w) / 32.0


def _render_face(rng: np.random.Generator, h: int, w: int, a: float, label: int) -> np.ndarray:
    ry = face_radius(a, h, w)
    rx = ry * rng.uniform(0.7, 0.9)
    jitter = 0.08 * min(h, w)
    cy = (h - 1) / 2 + rng.uniform(-jitter, jitter)
    cx = (w - 1) / 2 + rng.uniform(-jitter, jitter)
    theta = rng.uniform(0.0, np.pi)
    stripe_dir = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    colour = rng.uniform(0.5, 1.0, size=3)
    background = rng.uniform(0.0, 0.2)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    s = dx * np.cos(stripe_dir) + dy * np.sin(stripe_dir)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * FACE_FREQ[label] * s + phase)
    img = np.full((3, h, w), background)
    img[:, inside] = colour[:, None] * (0.3 + 0.7 * stripes[inside])
    return img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)


def gen_faces_like(n: int, h: int = 32, w: int = 32, seed: int = 0) -> SynthTaskPair:
    _check_shape(n, h, w)
    images = np.empty((n, 3, h, w))
    reg = np.empty(n)
    cls = np.empty(n, dtype=np.int32)
    for i in range(n):
        rng = _example_rng(seed, i)
        a = rng.uniform(0.0, 1.0)
        label = int(rng.integers(0, 2))
        images[i] = _render_face(rng, h, w, a, label)
        reg[i], cls[i] = a, label
    return SynthTaskPair(images, reg, cls, seed, "faces", value_range=1.0)


def scan_remap(label: int, v):
    """Fixed per-region intensity remap used as the dense regression target."""
    v = np.asarray(v, dtype=np.float64)
    if label == 0:
        return np.zeros_like(v)
    if label == 1:
        return np.sqrt(v)
    return 1.0 - v * v


def scan_radius_range(h: int, w: int) -> tuple[float, float]:
    scale = min(h, w) / 32.0
    return SCAN_RADIUS[0] * scale, SCAN_RADIUS[1] * scale


def expected_class_fraction(h: int = 32, w: int = 32) -> dict[int, float]:
    """Expected pixel fraction per label for ``gen_scans_like``.

    Each foreground class owns 1.5 discs on average (one fixed, half of the
    randomly labelled third), and a disc of radius ``r ~ U[lo, hi]`` covers
    ``pi * E[r^2] = pi * (hi^3 - lo^3) / (3 (hi - lo))`` pixels in expectation.
    """
    lo, hi = scan_radius_range(h, w)
    area = math.pi * (hi ** 3 - lo ** 3) / (3.0 * (hi - lo))
    fg = 1.5 * area / (h * w)
    return {0: 1.0 - 2 * fg, 1: fg, 2: fg}


def _place_discs(rng: np.random.Generator, h: int, w: int, radii: np.ndarray) -> np.ndarray:
    for _ in range(10_000):
        cy = rng.uniform(radii, h - 1 - radii)
        cx = rng.uniform(radii, w - 1 - radii)
        gaps = [math.hypot(cy[i] - cy[j], cx[i] - cx[j]) - radii[i] - radii[j]
                for i in range(len(radii)) for j in range(i)]
        if min(gaps) > 1.0:
            return np.stack([cy, cx], axis=1)
    raise RuntimeError("could not place non-overlapping discs")


def gen_scans_like(n: int, h: int = 32, w: int = 32, seed: int = 0) -> SynthTaskPair:
    _check_shape(n, h, w)
    images = np.empty((n, 1, h, w))
    reg = np.empty((n, 1, h, w))
    cls = np.empty((n, h, w), dtype=np.int32)
    lo, hi = scan_radius_range(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for i in range(n):
        rng = _example_rng(seed, i)
        radii = rng.uniform(lo, hi, size=3)
        labels = [1, 2, int(rng.integers(1, 3))]
        centres = _place_discs(rng, h, w, radii)
        label_map = np.zeros((h, w), dtype=np.int32)
        clean = np.full((h, w), rng.uniform(*SCAN_BANDS[0]))
        target = np.zeros((h, w))
        for (cy, cx), r, lab in zip(centres, radii, labels):
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            v = rng.uniform(*SCAN_BANDS[lab])
            label_map[disc] = lab
            clean[disc] = v
            target[disc] = scan_remap(lab, v)
        images[i, 0] = clean + rng.normal(0.0, PIXEL_NOISE, size=(h, w))
        reg[i, 0] = target
        cls[i] = label_map
    return SynthTaskPair(images, reg, cls, seed, "scans", value_range=1.0)


GENERATORS = {"faces": gen_faces_like, "scans": gen_scans_like}


def generate(kind: str, n: int, h: int = 32, w: int = 32, seed: int = 0) -> SynthTaskPair:
    if kind not in GENERATORS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {list(GENERATORS)}")
    return GENERATORS[kind](n, h, w, seed)


# -- augmentation ------------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, label_maps: Optional[np.ndarray] = None,
            reg_maps: Optional[np.ndarray] = None, max_scale: float = 0.10,
            max_rotation_deg: float = 10.0):
    """Random per-image scaling (+-``max_scale``) and rotation (+-``max_rotation_deg``).

    Dense targets, when given, receive the same transform (nearest neighbour
    for label maps). Returns a tuple ``(images, label_maps, reg_maps)``.
    """
    from scipy.ndimage import affine_transform

    images = np.array(images, dtype=np.float64, copy=True)
    labels = None if label_maps is None else np.array(label_maps, copy=True)
    regs = None if reg_maps is None else np.array(reg_maps, dtype=np.float64, copy=True)
    h, w = images.shape[-2:]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    for i in range(len(images)):
        s = 1.0 + rng.uniform(-max_scale, max_scale)
        ang = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]) / s
        offset = centre - rot @ centre
        for c in range(images.shape[1]):
            images[i, c] = affine_transform(images[i, c], rot, offset, order=1, mode="nearest")
        if labels is not None:
            labels[i] = affine_transform(labels[i], rot, offset, order=0, mode="nearest")
        if regs is not None:
            for c in range(regs.shape[1]):
                regs[i, c] = affine_transform(regs[i, c], rot, offset, order=0, mode="nearest")
    return images, labels, regs


# -- file format -------------------------------------------------------------

def _write_section(buf: list, arr: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.append(arr.tobytes())


def to_bytes(ds: SynthTaskPair) -> bytes:
    buf = [_HEADER.pack(MAGIC, FORMAT_VERSION, ds.version, KINDS.index(ds.kind), ds.seed, ds.value_range)]
    _write_section(buf, ds.images, "<f8")
    _write_section(buf, ds.target_reg, "<f8")
    _write_section(buf, ds.target_cls, "<i4")
    return b"".join(buf)


def save(ds: SynthTaskPair, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ds))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated dataset file: wanted {n} bytes at offset {self.pos}, "
                                     f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def section(self, dtype: str) -> np.ndarray:
        (ndim,) = struct.unpack("<I", self.take(4))
        if ndim > 8:
            raise DatasetFormatError(f"implausible section rank {ndim}")
        shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:] if dtype[0] == "<" else dtype)


def from_bytes(data: bytes) -> SynthTaskPair:
    r = _Reader(data)
    magic, fmt, version, kind, seed, value_range = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if fmt != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {fmt} (expected {FORMAT_VERSION})")
    if version != GENERATOR_VERSION:
        raise DatasetFormatError(f"dataset generator version {version} does not match {GENERATOR_VERSION}")
    if kind >= len(KINDS):
        raise DatasetFormatError(f"unknown kind code {kind}")
    images = r.section("<f8")
    reg = r.section("<f8")
    cls = r.section("<i4")
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after last section")
    return SynthTaskPair(np.array(images, dtype=np.float64), np.array(reg, dtype=np.float64),
                         np.array(cls, dtype=np.int32), int(seed), KINDS[kind], int(version), float(value_range))


def load(path) -> SynthTaskPair:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        return from_bytes(path.read_bytes())
    except DatasetFormatError as e:
        raise DatasetFormatError(f"{path}: {e}") from None


# -- loader ------------------------------------------------------------------

class BatchLoader:
    """Seeded shuffling loader. Epoch ``e`` uses permutation stream ``(seed, e)``.

    Incomplete trailing batches are dropped so every batch has size ``M``.
    """

    def __init__(self, ds: SynthTaskPair, batch_size: int, seed: int):
        if not 1 <= batch_size <= len(ds):
            raise ValueError(f"batch size must be in [1, {len(ds)}], got {batch_size}")
        self.ds = ds
        self.batch_size = batch_size
        self.seed = seed

    @property
    def batches_per_epoch(self) -> int:
        return len(self.ds) // self.batch_size

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.ds))

    def indices(self) -> Iterator[np.ndarray]:
        """Endless stream of index batches."""
        epoch = 0
        while True:
            order = self.epoch_order(epoch)
            for b in range(self.batches_per_epoch):
                yield order[b * self.batch_size:(b + 1) * self.batch_size]
            epoch += 1

    def __iter__(self) -> Iterator[SynthTaskPair]:
        for idx in self.indices():
            yield self.ds.subset(idx)
