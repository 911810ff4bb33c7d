"""Procedural texture "canopies" standing in for field tiles.

Every class is a parametric pattern rendered inside a soft-edged disc on a
dark background, with per-sample jitter of period, orientation, phase, color
and canopy size.  Base classes: blob, stripe, ring, speckle, checker.

Two novel (few-shot) sets are available.  ``hatch``/``dots``/``wave`` are
coarse textures unlike any base class.  The ``dots_*`` family is
fine-grained: one dot texture at three scales, the kind of difference the
base model was trained to treat as jitter, so it needs refinement to tell
them apart.
"""

from __future__ import annotations

import numpy as np

from .dataset import DatasetManifest, Tile
from .seeding import derive_seed

BASE_CLASSES = ("blob", "stripe", "ring", "speckle", "checker")
NOVEL_CLASSES = ("hatch", "dots", "wave")
# fine-grained family: one dot texture at three scales/densities
# name -> (period low, period high, dot radius as a fraction of the period)
DOT_SCALES = {"dots_fine": (7.0, 9.0, 0.30), "dots_mid": (12.0, 14.0, 0.22), "dots_coarse": (18.0, 22.0, 0.30)}
FINE_NOVEL_CLASSES = tuple(DOT_SCALES)


def _grid(size: int, angle: float, rng: np.random.Generator):
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    x -= c + rng.uniform(-3, 3)
    y -= c + rng.uniform(-3, 3)
    ca, sa = np.cos(angle), np.sin(angle)
    return ca * x + sa * y, -sa * x + ca * y


def _box_blur(a: np.ndarray, r: int) -> np.ndarray:
    k = 2 * r + 1
    p = np.pad(a, r, mode="reflect")
    cs = np.cumsum(np.cumsum(p, 0), 1)
    cs = np.pad(cs, ((1, 0), (1, 0)))
    return (cs[k:, k:] - cs[:-k, k:] - cs[k:, :-k] + cs[:-k, :-k]) / (k * k)


def pattern(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Pattern intensity in [0, 1] on a ``size x size`` grid."""
    angle = rng.uniform(0, np.pi)
    u, v = _grid(size, angle, rng)
    phase = rng.uniform(0, 2 * np.pi)
    if name == "blob":
        field = np.zeros((size, size))
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(5, 10))):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            s = rng.uniform(7, 12)
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return np.clip(field, 0, 1)
    if name == "stripe":
        return 0.5 + 0.5 * np.sin(2 * np.pi * u / rng.uniform(8, 11) + phase)
    if name == "ring":
        # thin bright circles on a dark canopy, coarser than the stripes
        r = np.hypot(u, v)
        p = rng.uniform(18, 24)
        return (np.abs(((r / p + phase / (2 * np.pi)) % 1.0) - 0.5) < 0.12).astype(np.float64)
    if name == "speckle":
        noise = rng.uniform(0, 1, size=(size, size))
        return np.clip((_box_blur(noise, 1) - 0.5) * 4 + 0.5, 0, 1)
    if name == "checker":
        p = rng.uniform(16, 22)
        return (np.sin(2 * np.pi * u / p + phase) * np.sin(2 * np.pi * v / p) > 0).astype(np.float64)
    if name == "hatch":
        p = rng.uniform(11, 15)
        line = lambda t: np.abs(((t / p + phase) % 1.0) - 0.5) < 0.12  # noqa: E731
        return (line(u) | line(v)).astype(np.float64)
    if name == "dots":
        p = rng.uniform(11, 15)
        du = ((u / p + phase) % 1.0) - 0.5
        dv = ((v / p) % 1.0) - 0.5
        return (np.hypot(du, dv) < 0.25).astype(np.float64)
    if name == "wave":
        p = rng.uniform(10, 14)
        amp = rng.uniform(4, 7)
        return 0.5 + 0.5 * np.sin(2 * np.pi * (u + amp * np.sin(2 * np.pi * v / rng.uniform(24, 34))) / p + phase)
    if name in DOT_SCALES:
        lo, hi, radius = DOT_SCALES[name]
        p = rng.uniform(lo, hi)
        du = ((u / p + phase / (2 * np.pi)) % 1.0) - 0.5
        dv = ((v / p) % 1.0) - 0.5
        return (np.hypot(du, dv) < radius).astype(np.float64)
    raise ValueError(f"unknown pattern {name!r}")


def render_tile(name: str, seed: int, size: int | None = None) -> np.ndarray:
    """Render one canopy of pattern ``name`` as an RGB uint8 array."""
    rng = np.random.default_rng(seed)
    size = size or int(rng.integers(100, 129))
    tex = pattern(name, size, rng)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    radius = rng.uniform(0.40, 0.49) * size
    mask = np.clip((radius - np.hypot(yy - c, xx - c)) / 4.0, 0, 1)
    green = rng.uniform(110, 190)
    color = np.array([rng.uniform(40, 110), green, rng.uniform(30, 90)])
    shade = 0.35 + 0.65 * tex
    canopy = shade[..., None] * color[None, None, :]
    ground = rng.uniform(10, 35, size=(size, size, 1)) * np.array([1.0, 0.9, 0.7])
    img = mask[..., None] * canopy + (1 - mask[..., None]) * ground
    img += rng.normal(0, 4, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_manifest(
    seed: int = 42,
    n_base: int = 13,
    n_heldout: int = 6,
    n_novel: int = 8,
    base_classes=BASE_CLASSES,
    novel_classes=NOVEL_CLASSES,
    gsd_cm: float = 6.0,
) -> DatasetManifest:
    """Base classes (``base_train`` + labeled held-out ``query`` tiles) and novel ``fewshot`` classes."""
    tiles, roles = [], {}

    def add(name: str, idx: int, role: str):
        tid = f"{name}_{role}_{idx:03d}"
        px = render_tile(name, derive_seed(seed, "synthetic", tid))
        tiles.append(Tile(tid, px, name, gsd_cm, source="synthetic"))
        roles[tid] = role

    for name in base_classes:
        for i in range(n_base):
            add(name, i, "base_train")
        for i in range(n_heldout):
            add(name, i, "query")
    for name in novel_classes:
        for i in range(n_novel):
            add(name, i, "fewshot")
    return DatasetManifest(tiles, roles)
