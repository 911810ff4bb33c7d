"""Tile augmentation operators and candidate expansion.

Five operators: arbitrary rotation, horizontal flip, vertical flip, rotation
followed by Gaussian noise on all RGB channels, and random crop.  Every
operator keeps the tile square and its side length; exposed area is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, Tile, fit_to_size
from .errors import ParameterError, ShapeError
from .seeding import derive_seed

OPERATORS = ("rotate", "hflip", "vflip", "rotate_noise", "crop")

# Default expansion: the five operators plus a second independent rotation,
# giving 13 * 7 = 91 candidates per capped class.
VARIANT_SCHEDULE = ("rotate", "hflip", "vflip", "rotate_noise", "crop", "rotate")
DEFAULT_VARIANTS = len(VARIANT_SCHEDULE)


@dataclass(frozen=True)
class AugmentationSpec:
    """Parameters for a single augmentation draw.

    ``rotation_deg=None`` means "draw uniformly from [0, 360) using ``seed``".
    Noise parameters are in 8-bit pixel units.
    """

    op: str
    rotation_deg: float | None = None
    noise_mu: float = 0.0
    noise_sigma: float = 25.0
    crop_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ParameterError(f"unknown augmentation op {self.op!r}; expected one of {OPERATORS}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ParameterError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def rotate_pixels(px: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise bilinear rotation about the center; corners zero-filled."""
    if degrees % 360 == 0:
        return px.copy()
    im = Image.fromarray(np.ascontiguousarray(px))
    return np.asarray(im.rotate(degrees, resample=Image.BILINEAR, expand=False, fillcolor=(0, 0, 0)))


def add_gaussian_noise(px: np.ndarray, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noisy = px.astype(np.float64) + rng.normal(mu, sigma, size=px.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def random_crop(px: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed window of ``fraction`` of each side, re-centered with zero padding."""
    h, w = px.shape[:2]
    ch = max(1, int(np.floor(fraction * h + 0.5)))
    cw = max(1, int(np.floor(fraction * w + 0.5)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return fit_to_size(px[top : top + ch, left : left + cw], h)


def augment(tile: Tile, spec: AugmentationSpec, new_id: str | None = None) -> Tile:
    """Apply one augmentation; the result inherits the label and records ``parent_id``."""
    h, w = tile.shape
    if h != w:
        raise ShapeError(f"tile {tile.tile_id!r} must be square (normalized) before augmentation, got {h}x{w}")
    rng = np.random.default_rng(spec.seed)
    px = tile.pixels
    if spec.op in ("rotate", "rotate_noise"):
        angle = spec.rotation_deg if spec.rotation_deg is not None else float(rng.uniform(0.0, 360.0))
        out = rotate_pixels(px, angle)
        if spec.op == "rotate_noise":
            out = add_gaussian_noise(out, spec.noise_mu, spec.noise_sigma, rng)
    elif spec.op == "hflip":
        out = px[:, ::-1]
    elif spec.op == "vflip":
        out = px[::-1]
    else:
        out = random_crop(px, spec.crop_fraction, rng)
    return replace(
        tile,
        tile_id=new_id or f"{tile.tile_id}~{spec.op}",
        pixels=np.ascontiguousarray(out),
        parent_id=tile.tile_id,
    )


def random_perturbation(seed: int) -> AugmentationSpec:
    """One operator drawn uniformly from the five, with its default parameter ranges."""
    rng = np.random.default_rng(seed)
    op = OPERATORS[int(rng.integers(len(OPERATORS)))]
    return AugmentationSpec(op=op, seed=int(rng.integers(2**32)))


def expand_candidates(
    capped: DatasetManifest,
    variants_per_tile: int = DEFAULT_VARIANTS,
    seed: int = 0,
    role: str = "base_train",
) -> DatasetManifest:
    """Add ``variants_per_tile`` augmented copies of every usable ``role`` tile.

    Variant ``j`` of a tile uses operator ``VARIANT_SCHEDULE[j % 6]`` and seed
    ``derive_seed(seed, "augment", tile_id, j)``, so the result does not depend
    on tile order. Variant ids are ``"<tile_id>~a<j>"``.
    """
    if variants_per_tile < 0:
        raise ParameterError(f"variants_per_tile must be >= 0, got {variants_per_tile}")
    if variants_per_tile == 0:
        return capped
    new_tiles = []
    for t in capped.tiles_with_role(role):
        for j in range(variants_per_tile):
            spec = AugmentationSpec(
                op=VARIANT_SCHEDULE[j % len(VARIANT_SCHEDULE)],
                seed=derive_seed(seed, "augment", t.tile_id, j),
            )
            new_tiles.append(augment(t, spec, new_id=f"{t.tile_id}~a{j}"))
    return capped.with_tiles(new_tiles, role)
