"""Shared data types, map I/O and the synthetic shapes corpus.

Arrays are plain numpy: images are ``(H, W, 3)`` floats in [0, 1], score maps
are ``(H, W)`` floats in [0, 1] and binary masks are ``(H, W)`` uint8 in {0, 1}.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ConfigError(ValueError):
    """Invalid configuration value (CLI exit code 2)."""


class ShapeError(ValueError):
    """Incompatible array dimensions."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class CapacityError(RuntimeError):
    """Input exceeds a configured compute budget."""


class Provenance(str, enum.Enum):
    PIXEL = "pixel"
    SUPERPIXEL = "superpixel"
    FUSED_AVG = "fused_avg"
    FUSED_INTERSECT = "fused_intersect"
    FUSED_UNION = "fused_union"
    YS = "ys"


@dataclass(frozen=True)
class PseudoLabel:
    mask: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        check_mask(self.mask)
        object.__setattr__(self, "provenance", Provenance(self.provenance))


@dataclass
class Sample:
    image: np.ndarray
    category: np.ndarray
    gt_mask: np.ndarray
    shapes: list = field(default_factory=list)


SHAPE_TYPES = ("disk", "square", "triangle", "cross", "diamond", "ring", "hbar", "vbar")

# base hue per shape type; the classifier has to learn shape and tint jointly
_SHAPE_HUES = (0.0, 0.33, 0.62, 0.12, 0.78, 0.5, 0.9, 0.22)


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ShapeError(f"image must be at least 8x8, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise NumericError("image values must be finite and in [0, 1]")
    return image


def check_map(m: np.ndarray) -> np.ndarray:
    if m.ndim != 2:
        raise ShapeError(f"expected (H, W) map, got {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise NumericError("score map values must be finite and in [0, 1]")
    return m


def check_mask(m: np.ndarray) -> np.ndarray:
    if m.ndim != 2:
        raise ShapeError(f"expected (H, W) mask, got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise NumericError("mask values must be 0 or 1")
    return m


def check_same_hw(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"spatial dims differ: {a.shape[:2]} vs {b.shape[:2]}")


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericError("cannot normalize a map with non-finite entries")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) matrix of corner-aligned linear interpolation weights."""
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"interpolation sizes must be >= 1, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        if n_out == 1:
            mat[0, 0] = 1.0
        else:
            mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def resize_bilinear(x: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling of a map (H, W) or image (H, W, C)."""
    if new_height < 1 or new_width < 1:
        raise ConfigError(f"target size must be positive, got {new_height}x{new_width}")
    h, w = x.shape[:2]
    if (h, w) == (new_height, new_width):
        return x.copy()
    ry = interp_matrix(h, new_height)
    rx = interp_matrix(w, new_width)
    if x.ndim == 2:
        return ry @ x @ rx.T
    chans = np.moveaxis(x, -1, 0)
    return np.moveaxis(np.matmul(ry, np.matmul(chans, rx.T)), 0, -1)


# --- synthetic corpus -------------------------------------------------------

def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if kind == "triangle":
        # apex up, base at cy + 0.8r
        top, base = cy - r, cy + 0.8 * r
        half = (yy - top) / (base - top) * r
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= 0.4 * r) & (np.abs(dy) <= r)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.35, 0.6, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.08, size=3)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += wave[..., None] * amp
    img += rng.normal(0.0, 0.025, size=img.shape)
    return img


@dataclass(frozen=True)
class SceneParams:
    """Appearance knobs of the synthetic scenes.

    ``split_prob`` is the chance that an object is cut by a random line into
    two differently coloured parts; clutter ellipses are never salient.
    """
    radius_range: tuple = (0.15, 0.28)
    clutter: tuple = (2, 5)
    shading: float = 0.45
    texture: float = 0.06
    split_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi < 0.5, got {self.radius_range}")
        if not 0 <= self.clutter[0] <= self.clutter[1]:
            raise ConfigError(f"invalid clutter range {self.clutter}")
        if not (0 <= self.shading < 1 and self.texture >= 0 and 0 <= self.split_prob <= 1):
            raise ConfigError(f"invalid scene parameters {self}")


def _draw_clutter(rng, img, yy, xx, size, scene: SceneParams) -> None:
    for _ in range(int(rng.integers(scene.clutter[0], scene.clutter[1] + 1))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.05, 0.14, 2) * size
        m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        col = _hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.4, 0.95))
        img[m] = col + rng.normal(0, 0.02, size=(int(m.sum()), 3))


def make_sample(rng: np.random.Generator, image_size: int, num_categories: int,
                scene: SceneParams = SceneParams()) -> Sample:
    size = image_size
    img = _background(rng, size)
    img += rng.normal(0, scene.texture, size=img.shape)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    _draw_clutter(rng, img, yy, xx, size, scene)
    gt = np.zeros((size, size), dtype=bool)
    n_shapes = int(rng.choice([1, 2, 3], p=[0.45, 0.35, 0.2]))
    placed = []
    category = np.zeros(num_categories, dtype=np.uint8)
    for _ in range(n_shapes):
        for _attempt in range(50):
            kind_id = int(rng.integers(num_categories))
            r = rng.uniform(*scene.radius_range) * size
            cy, cx = rng.uniform(r + 1, size - r - 2, size=2)
            if all(np.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr, _ in placed):
                break
        else:
            continue
        mask = _shape_mask(SHAPE_TYPES[kind_id], cy, cx, r, size) & ~gt
        hue = (_SHAPE_HUES[kind_id] + rng.uniform(-0.04, 0.04)) % 1.0
        color = _hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
        # linear shading along a random direction
        ang = rng.uniform(0, 2 * np.pi)
        t = ((yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)) / (2 * r) + 0.5
        shading = (1 - scene.shading * np.clip(t, 0, 1))[mask]
        vals = color[None] * shading[:, None]
        if rng.uniform() < scene.split_prob:
            hue2 = (hue + rng.uniform(0.25, 0.75)) % 1.0
            color2 = _hsv_to_rgb(hue2, rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0))
            ang2 = rng.uniform(0, 2 * np.pi)
            side = ((yy - cy) * np.sin(ang2) + (xx - cx) * np.cos(ang2))[mask] > 0
            vals[side] = color2[None] * shading[side][:, None]
        img[mask] = vals + rng.normal(0.0, scene.texture, size=(int(mask.sum()), 3))
        gt |= mask
        category[kind_id] = 1
        placed.append((cy, cx, r, SHAPE_TYPES[kind_id]))
    img = np.clip(img, 0.0, 1.0)
    return Sample(image=img, category=category, gt_mask=gt.astype(np.uint8),
                  shapes=[p[3] for p in placed])


def gen_synthetic_dataset(count: int, image_size: int = 64, num_categories: int = 4,
                          seed: int = 0, scene: SceneParams = SceneParams()) -> list[Sample]:
    """Deterministic corpus of 1-3 non-overlapping shapes over cluttered, textured backgrounds."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    if image_size < 32:
        raise ConfigError("image_size must be >= 32")
    if not 2 <= num_categories <= len(SHAPE_TYPES):
        raise ConfigError(f"num_categories must be in [2, {len(SHAPE_TYPES)}]")
    rng = np.random.default_rng(seed)
    return [make_sample(rng, image_size, num_categories, scene) for _ in range(count)]


# --- file formats -------------------------------------------------------------

WSF_MAGIC = b"WSF1"


def write_wsf(path, array: np.ndarray) -> None:
    """Little-endian tensor file: magic, rank u32, dims u32..., f32 payload (row-major)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = WSF_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_wsf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != WSF_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return payload.reshape(dims).astype(np.float32)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, x: np.ndarray) -> None:
    """Grayscale for (H, W) maps/masks, RGB for (H, W, 3); value v stored as round(255 v)."""
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def load_mask_png(path) -> np.ndarray:
    return (load_png(path) >= 0.5).astype(np.uint8)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_dataset(samples: list[Sample], out_dir) -> list[dict]:
    """Write images/gt PNGs and ``manifest.json``; returns the manifest entries."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        img_rel, gt_rel = f"images/{i:05d}.png", f"gt/{i:05d}.png"
        save_png(out / img_rel, s.image)
        save_png(out / gt_rel, s.gt_mask)
        manifest.append({"image_path": img_rel, "gt_path": gt_rel,
                         "category_bits": [int(b) for b in s.category]})
    dump_json(out / "manifest.json", manifest)
    return manifest


def read_dataset(data_dir) -> list[Sample]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    return [Sample(image=load_png(root / e["image_path"]),
                   category=np.array(e["category_bits"], dtype=np.uint8),
                   gt_mask=load_mask_png(root / e["gt_path"]))
            for e in manifest]
