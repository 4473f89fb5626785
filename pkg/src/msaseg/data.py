"""Synthetic multi-scale shapes dataset plus binary PPM/PGM I/O.

Each image has one or two large regions (side >= 40% of the image) and two
to four small objects (side <= 12%), so that both a wide and a narrow field
of view are needed to label it. Geometry is rasterised on integer pixel
centres; only the colour noise is floating point. Randomness comes from a
Philox counter-based generator keyed on (seed, index), which makes every
sample independently reproducible.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

# background, two large-region classes, two small-object classes
BASE_COLORS = np.array([
    [0.15, 0.15, 0.15],
    [0.85, 0.25, 0.25],
    [0.25, 0.35, 0.85],
    [0.85, 0.60, 0.20],
    [0.25, 0.80, 0.80],
])

LARGE_CLASSES = (1, 2)
SMALL_CLASSES = (3, 4)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    n_class: int = 5
    large_count: tuple[int, int] = (1, 2)
    small_count: tuple[int, int] = (2, 4)
    large_min_frac: float = 0.40
    large_max_frac: float = 0.70
    small_min_px: int = 4
    small_max_frac: float = 0.12
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_class != len(BASE_COLORS):
            raise ValueError(f"the generator defines exactly {len(BASE_COLORS)} classes")
        if self.small_max_px < self.small_min_px:
            raise ValueError(f"image size {self.size} too small for small objects")

    @property
    def large_min_px(self) -> int:
        return math.ceil(self.large_min_frac * self.size)

    @property
    def large_max_px(self) -> int:
        return max(self.large_min_px, int(self.large_max_frac * self.size))

    @property
    def small_max_px(self) -> int:
        return int(self.small_max_frac * self.size)


@dataclass
class SynthSample:
    image: np.ndarray               # float32 [3, H, W] in [0, 1]
    labels: np.ndarray              # uint8 [H, W]
    shapes: list = field(default_factory=list)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    if index < 0:
        raise ValueError("sample index must be non-negative")
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _shape_mask(kind: str, y0: int, x0: int, y1: int, x1: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rect":
        mask[y0:y1, x0:x1] = True
        return mask
    # ellipse inscribed in the half-open box, tested at doubled pixel centres
    yy, xx = np.mgrid[y0:y1, x0:x1]
    h, w = y1 - y0, x1 - x0
    dy = 2 * yy + 1 - (y0 + y1)
    dx = 2 * xx + 1 - (x0 + x1)
    mask[y0:y1, x0:x1] = dx * dx * h * h + dy * dy * w * w <= w * w * h * h
    return mask


def generate(spec: SynthSpec, index: int) -> SynthSample:
    rng = sample_rng(spec.seed, index)
    n = spec.size
    labels = np.zeros((n, n), dtype=np.uint8)
    shapes = []
    plan = [("large", c) for c in rng.choice(LARGE_CLASSES, size=rng.integers(spec.large_count[0], spec.large_count[1] + 1))]
    plan += [("small", c) for c in rng.choice(SMALL_CLASSES, size=rng.integers(spec.small_count[0], spec.small_count[1] + 1))]
    for category, cls in plan:
        lo, hi = (spec.large_min_px, spec.large_max_px) if category == "large" else (spec.small_min_px, spec.small_max_px)
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        y0 = int(rng.integers(0, n - h + 1))
        x0 = int(rng.integers(0, n - w + 1))
        kind = "rect" if rng.integers(2) == 0 else "ellipse"
        labels[_shape_mask(kind, y0, x0, y0 + h, x0 + w, n)] = cls
        shapes.append({"class": int(cls), "bbox": (y0, x0, y0 + h, x0 + w), "scale": category, "kind": kind})
    image = BASE_COLORS[labels].transpose(2, 0, 1)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SynthSample(image, labels, shapes)


def split_indices(count: int) -> tuple[list[int], list[int]]:
    """Even indices train, odd indices validate."""
    return list(range(0, count, 2)), list(range(1, count, 2))


# -- PPM / PGM -------------------------------------------------------------

def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image: np.ndarray) -> bytes:
    """Binary P6 from a float [3, H, W] image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(image).transpose(1, 2, 0).tobytes()


def write_pgm(labels: np.ndarray) -> bytes:
    """Binary P5 from an integer [H, W] grid with values below 256."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected an [H, W] grid, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise FormatError(f"byte offset 0: expected magic {magic.decode()}, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"byte offset {pos}: expected a decimal header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"byte offset {pos}: expected a single whitespace byte after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"byte offset {pos}: image dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"byte offset {pos}: only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def read_ppm(buf: bytes) -> np.ndarray:
    w, h, _, start = _parse_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - start < need:
        raise FormatError(f"byte offset {len(buf)}: pixel data truncated, need {need} bytes from offset {start}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


def read_pgm(buf: bytes) -> np.ndarray:
    w, h, _, start = _parse_header(buf, b"P5")
    need = w * h
    if len(buf) - start < need:
        raise FormatError(f"byte offset {len(buf)}: pixel data truncated, need {need} bytes from offset {start}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w).copy()


def default_palette(n_class: int = len(BASE_COLORS)) -> np.ndarray:
    if n_class <= len(BASE_COLORS):
        return BASE_COLORS[:n_class].copy()
    rng = np.random.default_rng(n_class)
    return np.concatenate([BASE_COLORS, rng.uniform(0, 1, size=(n_class - len(BASE_COLORS), 3))])


def colorize_mask(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Float [3, H, W] image with each pixel set to its class colour."""
    labels = np.asarray(labels)
    palette = np.asarray(palette, dtype=np.float32)
    if labels.size and (labels.min() < 0 or labels.max() >= len(palette)):
        raise ValueError(f"class {int(labels.max())} is outside the {len(palette)}-entry palette")
    return palette[labels].transpose(2, 0, 1).copy()


# -- dataset directories ---------------------------------------------------

def write_dataset(spec: SynthSpec, count: int, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i in range(count):
        sample = generate(spec, i)
        with open(os.path.join(out_dir, f"img_{i:06d}.ppm"), "wb") as f:
            f.write(write_ppm(sample.image))
        with open(os.path.join(out_dir, f"lab_{i:06d}.pgm"), "wb") as f:
            f.write(write_pgm(sample.labels))
    meta = {"size": spec.size, "nClass": spec.n_class, "seed": spec.seed, "count": count}
    with open(os.path.join(out_dir, "dataset.meta"), "w", encoding="utf-8") as f:
        f.writelines(f"{k}={v}\n" for k, v in meta.items())


def read_meta(path: str) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                meta[key.strip()] = int(value.strip())
    return meta


def load_dataset(path: str) -> tuple[np.ndarray, np.ndarray, dict]:
    """Images (N, 3, H, W) float32 and labels (N, H, W) uint8."""
    meta_path = os.path.join(path, "dataset.meta")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"no dataset.meta in {path}; run gen-data first")
    meta = read_meta(meta_path)
    images, labels = [], []
    for i in range(meta["count"]):
        with open(os.path.join(path, f"img_{i:06d}.ppm"), "rb") as f:
            images.append(read_ppm(f.read()))
        with open(os.path.join(path, f"lab_{i:06d}.pgm"), "rb") as f:
            labels.append(read_pgm(f.read()))
    return np.stack(images), np.stack(labels), meta
