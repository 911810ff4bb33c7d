"""Canopy tile ingestion, geometric normalization and candidate capping.

Tiles arrive as pre-detected single-canopy cutouts plus a JSON manifest::

    {"tiles": [{"id": "sp1_001", "path": "img/sp1_001.png", "label": "sp1",
                "gsd_cm": 6.0, "role": "base_train", "excluded": false}, ...]}

Image paths are relative to the manifest's directory.  Pixels stay ``uint8``
through every operation in this module.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import IngestionError, NormalizationError, ParameterError, ValidationError
from .seeding import derive_seed

log = logging.getLogger(__name__)

ROLES = ("base_train", "fewshot", "query")
SOURCES = ("uav", "benchmark", "synthetic")

TILE_SIZE = 128
TARGET_GSD_CM = 6.0


@dataclass(frozen=True, eq=False)
class Tile:
    """One canopy cutout.

    ``pixels`` is an ``H x W x 3`` uint8 array and is made read-only on
    construction; derive new tiles with :func:`dataclasses.replace`.
    ``parent_id`` is set on augmented variants and names the source tile.
    """

    tile_id: str
    pixels: np.ndarray
    class_label: str | None
    gsd_cm: float
    source: str = "uav"
    excluded: bool = False
    parent_id: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(
                f"tile {self.tile_id!r}: expected HxWx3 uint8 pixels, got {px.dtype} {px.shape}"
            )
        if not self.gsd_cm > 0:
            raise ValidationError(f"tile {self.tile_id!r}: gsd_cm must be positive, got {self.gsd_cm}")
        if self.source not in SOURCES:
            raise ValidationError(f"tile {self.tile_id!r}: unknown source {self.source!r}")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered tiles plus a role assignment. Immutable; operations return new manifests."""

    tiles: tuple[Tile, ...]
    role_map: Mapping[str, str]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tiles = tuple(self.tiles)
        object.__setattr__(self, "tiles", tiles)
        index: dict[str, Tile] = {}
        for t in tiles:
            if t.tile_id in index:
                raise ValidationError(f"duplicate tile_id {t.tile_id!r}")
            index[t.tile_id] = t
        for tid, role in self.role_map.items():
            if tid not in index:
                raise ValidationError(f"role_map references unknown tile {tid!r}")
            if role not in ROLES:
                raise ValidationError(f"tile {tid!r}: unknown role {role!r}")
        object.__setattr__(self, "role_map", dict(self.role_map))
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tiles)

    def __contains__(self, tile_id: str) -> bool:
        return tile_id in self._index

    def get(self, tile_id: str) -> Tile:
        try:
            return self._index[tile_id]
        except KeyError:
            raise ValidationError(f"tile {tile_id!r} not in manifest") from None

    def role_of(self, tile_id: str) -> str | None:
        return self.role_map.get(tile_id)

    def tiles_with_role(self, role: str, include_excluded: bool = False) -> list[Tile]:
        return [
            t
            for t in self.tiles
            if self.role_map.get(t.tile_id) == role and (include_excluded or not t.excluded)
        ]

    @property
    def class_roster(self) -> dict[str, list[str]]:
        """Class labels per role, in first-appearance order (excluded tiles count)."""
        roster: dict[str, list[str]] = {r: [] for r in ROLES}
        for t in self.tiles:
            role = self.role_map.get(t.tile_id)
            if role is None or t.class_label is None:
                continue
            if t.class_label not in roster[role]:
                roster[role].append(t.class_label)
        return roster

    def by_class(self, role: str) -> dict[str, list[Tile]]:
        """Usable (non-excluded) tiles of ``role`` grouped by label, roster order."""
        groups: dict[str, list[Tile]] = {c: [] for c in self.class_roster[role]}
        for t in self.tiles_with_role(role):
            if t.class_label is not None:
                groups[t.class_label].append(t)
        return groups

    def class_counts(self, role: str) -> dict[str, int]:
        return {c: len(ts) for c, ts in self.by_class(role).items()}

    def subset(self, tile_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(tile_ids)
        tiles = [t for t in self.tiles if t.tile_id in keep]
        return DatasetManifest(tiles, {t.tile_id: self.role_map[t.tile_id] for t in tiles if t.tile_id in self.role_map})

    def with_tiles(self, tiles: Iterable[Tile], role: str) -> "DatasetManifest":
        """Return a manifest extended with ``tiles`` assigned to ``role``."""
        new = list(tiles)
        role_map = dict(self.role_map)
        role_map.update({t.tile_id: role for t in new})
        return DatasetManifest(self.tiles + tuple(new), role_map)

    def map_tiles(self, fn) -> "DatasetManifest":
        return DatasetManifest([fn(t) for t in self.tiles], self.role_map)


# ---------------------------------------------------------------------------
# I/O


def read_image(path: str | Path) -> np.ndarray:
    """Read a 3-band 8-bit PNG or GeoTIFF into an ``H x W x 3`` uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"image file not found: {path}")
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            import tifffile

            arr = np.asarray(tifffile.imread(path))
            if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
                arr = np.moveaxis(arr, 0, -1)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB") if im.mode != "RGB" else im)
    except Exception as exc:  # noqa: BLE001 - decoder errors vary by format
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise IngestionError(f"{path}: expected 3-band 8-bit image, got {arr.dtype} {arr.shape}")
    return np.ascontiguousarray(arr)


def write_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def ingest_tiles(root_path: str | Path, manifest_file: str | Path) -> DatasetManifest:
    """Load every tile listed in a manifest JSON document.

    A relative ``manifest_file`` is resolved against ``root_path``; image
    paths inside the manifest are relative to the manifest's own directory.
    Excluded tiles are loaded and kept, flagged.
    """
    manifest_path = Path(manifest_file)
    if not manifest_path.is_absolute():
        manifest_path = Path(root_path) / manifest_path
    if not manifest_path.is_file():
        raise IngestionError(f"manifest file not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tiles"), list):
        raise ValidationError(f"{manifest_path}: top-level object must carry a 'tiles' array")

    base = manifest_path.parent
    tiles: list[Tile] = []
    role_map: dict[str, str] = {}
    seen: set[str] = set()
    for i, entry in enumerate(doc["tiles"]):
        try:
            tid = str(entry["id"])
            rel = entry["path"]
            gsd = float(entry["gsd_cm"])
            role = entry["role"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{manifest_path}: tile entry {i} is malformed ({exc})") from exc
        if tid in seen:
            raise ValidationError(f"duplicate tile_id {tid!r} in {manifest_path}")
        seen.add(tid)
        pixels = read_image(base / rel)
        label = entry.get("label")
        tiles.append(
            Tile(
                tile_id=tid,
                pixels=pixels,
                class_label=None if label is None else str(label),
                gsd_cm=gsd,
                source=entry.get("source", "uav"),
                excluded=bool(entry.get("excluded", False)),
                parent_id=entry.get("parent"),
            )
        )
        role_map[tid] = role
    manifest = DatasetManifest(tiles, role_map)
    log.info("ingested %d tiles from %s", len(tiles), manifest_path)
    return manifest


def save_manifest(manifest: DatasetManifest, manifest_file: str | Path, image_dir: str = "tiles") -> Path:
    """Write tiles as PNGs under ``image_dir`` (relative) and the manifest JSON next to them."""
    manifest_file = Path(manifest_file)
    img_root = manifest_file.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in manifest.tiles:
        rel = f"{image_dir}/{_safe_name(t.tile_id)}.png"
        write_png(t.pixels, manifest_file.parent / rel)
        entry = {
            "id": t.tile_id,
            "path": rel,
            "label": t.class_label,
            "gsd_cm": t.gsd_cm,
            "role": manifest.role_map.get(t.tile_id, "query"),
            "excluded": t.excluded,
            "source": t.source,
        }
        if t.parent_id is not None:
            entry["parent"] = t.parent_id
        entries.append(entry)
    manifest_file.write_text(json.dumps({"tiles": entries}, indent=1))
    return manifest_file


def _safe_name(tile_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in tile_id)


# ---------------------------------------------------------------------------
# normalization


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def fit_to_size(pixels: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad each axis to ``size``.

    Odd remainders go to the bottom/right: padding adds the extra row there,
    cropping removes it from there.
    """
    out = pixels
    h, w = out.shape[:2]
    if h > size:
        top = (h - size) // 2
        out = out[top : top + size]
    if w > size:
        left = (w - size) // 2
        out = out[:, left : left + size]
    h, w = out.shape[:2]
    if h < size or w < size:
        pad_top = (size - h) // 2 if h < size else 0
        pad_left = (size - w) // 2 if w < size else 0
        canvas = np.zeros((size, size, 3), dtype=np.uint8)
        canvas[pad_top : pad_top + h, pad_left : pad_left + w] = out
        out = canvas
    return np.ascontiguousarray(out)


def resampled_shape(shape: tuple[int, int], gsd_cm: float, target_gsd_cm: float) -> tuple[int, int]:
    # (side * gsd) / target keeps exact ratios exact, e.g. 600 * 1 / 6 == 100
    h, w = shape
    if gsd_cm == target_gsd_cm:
        return h, w
    return max(1, _round_half_up(h * gsd_cm / target_gsd_cm)), max(1, _round_half_up(w * gsd_cm / target_gsd_cm))


def resample(pixels: np.ndarray, gsd_cm: float, target_gsd_cm: float) -> np.ndarray:
    """Bilinear resize from ``gsd_cm`` to ``target_gsd_cm`` ground sample distance."""
    nh, nw = resampled_shape(pixels.shape[:2], gsd_cm, target_gsd_cm)
    if (nh, nw) == pixels.shape[:2]:
        return pixels
    im = Image.fromarray(np.ascontiguousarray(pixels))
    return np.asarray(im.resize((nw, nh), resample=Image.BILINEAR))


def normalize_tile(tile: Tile, target_gsd_cm: float = TARGET_GSD_CM, target_size: int = TILE_SIZE) -> Tile:
    """Resample ``tile`` to ``target_gsd_cm`` and fit it to ``target_size`` square."""
    if not target_gsd_cm > 0:
        raise ParameterError(f"target_gsd_cm must be positive, got {target_gsd_cm}")
    if target_size < 1:
        raise ParameterError(f"target_size must be >= 1, got {target_size}")
    h, w = tile.shape
    if h == 0 or w == 0:
        raise NormalizationError(f"tile {tile.tile_id!r} has zero area")
    px = fit_to_size(resample(tile.pixels, tile.gsd_cm, target_gsd_cm), target_size)
    if px is tile.pixels and tile.gsd_cm == target_gsd_cm:
        return tile
    return replace(tile, pixels=px, gsd_cm=float(target_gsd_cm))


def normalize_manifest(
    manifest: DatasetManifest, target_gsd_cm: float = TARGET_GSD_CM, target_size: int = TILE_SIZE
) -> tuple[DatasetManifest, list[dict]]:
    """Normalize every tile; also return a log of the resample/pad/crop actions taken."""
    actions = []
    tiles = []
    for t in manifest.tiles:
        nt = normalize_tile(t, target_gsd_cm, target_size)
        scaled = resampled_shape(t.shape, t.gsd_cm, target_gsd_cm)
        actions.append(
            {
                "id": t.tile_id,
                "input_shape": list(t.shape),
                "input_gsd_cm": t.gsd_cm,
                "resampled_shape": list(scaled),
                "action": _fit_action(scaled, target_size),
            }
        )
        tiles.append(nt)
    return DatasetManifest(tiles, manifest.role_map), actions


def _fit_action(shape: tuple[int, int], size: int) -> str:
    h, w = shape
    if (h, w) == (size, size):
        return "none"
    parts = []
    if h > size or w > size:
        parts.append("crop")
    if h < size or w < size:
        parts.append("pad")
    return "+".join(parts)


# ---------------------------------------------------------------------------
# capping


def cap_candidates(
    manifest: DatasetManifest, per_class_cap: int, seed: int, role: str = "base_train"
) -> DatasetManifest:
    """Keep at most ``per_class_cap`` usable tiles per class of ``role``.

    Selection is seeded uniform sampling without replacement, drawn per class
    from ``derive_seed(seed, "cap", label)``; kept tiles preserve manifest
    order. Tiles of other roles pass through untouched.
    """
    if per_class_cap < 1:
        raise ParameterError(f"per_class_cap must be >= 1, got {per_class_cap}")
    dropped: set[str] = set()
    for label, tiles in manifest.by_class(role).items():
        if not tiles:
            raise ValidationError(f"class {label!r} has no usable tiles")
        if len(tiles) <= per_class_cap:
            continue
        rng = np.random.default_rng(derive_seed(seed, "cap", role, label))
        keep = set(rng.choice(len(tiles), size=per_class_cap, replace=False).tolist())
        dropped.update(t.tile_id for i, t in enumerate(tiles) if i not in keep)
    if not dropped:
        return manifest
    return manifest.subset(t.tile_id for t in manifest.tiles if t.tile_id not in dropped)
