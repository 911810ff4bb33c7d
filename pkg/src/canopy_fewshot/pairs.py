"""Similar/dissimilar pair enumeration and balanced sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import ParameterError, ValidationError
from .seeding import derive_seed, fingerprint


@dataclass(frozen=True, slots=True)
class PairSample:
    tile_a_id: str
    tile_b_id: str
    target: int  # 1 = same class

    def __post_init__(self):
        if self.tile_a_id == self.tile_b_id:
            raise ValidationError(f"self-pair {self.tile_a_id!r}")
        if self.target not in (0, 1):
            raise ValidationError(f"pair target must be 0 or 1, got {self.target!r}")


@dataclass(frozen=True)
class PairDataset:
    """Balanced training pairs.

    ``counts`` holds the sampled sizes per side, ``enumerated`` the sizes of
    the pools they were drawn from, ``requested`` the asked-for per-side size.
    """

    pairs: tuple[PairSample, ...]
    counts: dict = field(default_factory=dict)
    seed: int = 0
    enumerated: dict = field(default_factory=dict)
    requested: int | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def fingerprint(self) -> str:
        return fingerprint([(p.tile_a_id, p.tile_b_id, p.target) for p in self.pairs])

    def tile_ids(self) -> set[str]:
        ids = set()
        for p in self.pairs:
            ids.add(p.tile_a_id)
            ids.add(p.tile_b_id)
        return ids

    def header(self) -> dict:
        return {
            "counts": dict(self.counts),
            "enumerated": dict(self.enumerated),
            "requested_per_side": self.requested,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
        }


def enumerate_similar_pairs(candidates: DatasetManifest, role: str = "base_train") -> list[PairSample]:
    """All unordered within-class pairs, m(m-1)/2 per class of size m."""
    out = []
    for tiles in candidates.by_class(role).values():
        out.extend(PairSample(a.tile_id, b.tile_id, 1) for a, b in combinations(tiles, 2))
    return out


def enumerate_dissimilar_pairs(candidates: DatasetManifest, role: str = "base_train") -> list[PairSample]:
    """All unordered cross-class pairs, sum over i<j of m_i * m_j."""
    groups = [ts for ts in candidates.by_class(role).values() if ts]
    if len(groups) < 2:
        raise ValidationError(f"need at least 2 non-empty classes for dissimilar pairs, got {len(groups)}")
    out = []
    for gi, gj in combinations(groups, 2):
        out.extend(PairSample(a.tile_id, b.tile_id, 0) for a in gi for b in gj)
    return out


def sample_balanced(
    similar: list[PairSample], dissimilar: list[PairSample], n_per_side: int, seed: int
) -> PairDataset:
    """Draw the same number of pairs from each side, uniformly without replacement.

    If either side holds fewer than ``n_per_side`` pairs, that side is taken
    whole and the other side is subsampled to the same size.
    """
    if not similar or not dissimilar:
        raise ValidationError(
            f"cannot balance: {len(similar)} similar and {len(dissimilar)} dissimilar pairs"
        )
    if n_per_side < 1:
        raise ParameterError(f"n_per_side must be >= 1, got {n_per_side}")
    n = min(n_per_side, len(similar), len(dissimilar))
    chosen = []
    for name, side in (("similar", similar), ("dissimilar", dissimilar)):
        if n == len(side):
            chosen.extend(side)
            continue
        rng = np.random.default_rng(derive_seed(seed, "balance", name))
        idx = np.sort(rng.choice(len(side), size=n, replace=False))
        chosen.extend(side[i] for i in idx)
    return PairDataset(
        pairs=tuple(chosen),
        counts={"similar": n, "dissimilar": n},
        seed=seed,
        enumerated={"similar": len(similar), "dissimilar": len(dissimilar)},
        requested=n_per_side,
    )


def build_pair_dataset(
    candidates: DatasetManifest, n_per_side: int | None, seed: int, role: str = "base_train"
) -> PairDataset:
    """Enumerate both sides and balance; ``n_per_side=None`` keeps the smaller side whole."""
    sim = enumerate_similar_pairs(candidates, role)
    dis = enumerate_dissimilar_pairs(candidates, role)
    if n_per_side is None:
        n_per_side = min(len(sim), len(dis))
    return sample_balanced(sim, dis, n_per_side, seed)


def validate_pairs(pairs: PairDataset, manifest: DatasetManifest) -> None:
    """Check every pair references a usable tile and that targets agree with labels."""
    for p in pairs.pairs:
        a = manifest.get(p.tile_a_id) if p.tile_a_id in manifest else None
        b = manifest.get(p.tile_b_id) if p.tile_b_id in manifest else None
        for tid, t in ((p.tile_a_id, a), (p.tile_b_id, b)):
            if t is None:
                raise ValidationError(f"pair references missing tile {tid!r}")
            if t.excluded:
                raise ValidationError(f"pair references excluded tile {tid!r}")
        same = a.class_label == b.class_label
        if same != bool(p.target):
            raise ValidationError(
                f"pair ({p.tile_a_id}, {p.tile_b_id}) has target {p.target} but labels "
                f"{a.class_label!r}/{b.class_label!r}"
            )


def save_pairs(dataset: PairDataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` as JSON lines and ``<path stem>.header.json`` alongside."""
    path = Path(path)
    with path.open("w") as fh:
        for p in dataset.pairs:
            fh.write(json.dumps({"a": p.tile_a_id, "b": p.tile_b_id, "target": p.target}) + "\n")
    header = path.with_name(path.stem + ".header.json")
    header.write_text(json.dumps(dataset.header(), indent=1))
    return path, header


def load_pairs(path: str | Path) -> PairDataset:
    path = Path(path)
    header_path = path.with_name(path.stem + ".header.json")
    if not path.is_file():
        raise ValidationError(f"pairs file not found: {path}")
    header = json.loads(header_path.read_text()) if header_path.is_file() else {}
    pairs = []
    with path.open() as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                pairs.append(PairSample(rec["a"], rec["b"], int(rec["target"])))
    counts = header.get("counts") or {
        "similar": sum(p.target for p in pairs),
        "dissimilar": sum(1 - p.target for p in pairs),
    }
    return PairDataset(
        pairs=tuple(pairs),
        counts=counts,
        seed=header.get("seed", 0),
        enumerated=header.get("enumerated", {}),
        requested=header.get("requested_per_side"),
    )
