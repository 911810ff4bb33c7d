"""Declarative run configuration.

Precedence, lowest first: dataclass defaults, then any built-in preset
(the synthetic budget, ``--quick``), then a JSON config file, then
command-line overrides (``--seed`` and ``--set section.key=value``).  Every
stochastic stage draws its seed from ``sub_seed(stage)``, a hash of the
global seed and the stage name, so one integer pins an entire run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ParameterError
from .seeding import derive_seed, fingerprint


@dataclass
class DataConfig:
    root: str | None = None  # directory the raw manifest's image paths are relative to
    manifest: str = "manifest.json"
    target_gsd_cm: float = 6.0
    tile_size: int = 128


@dataclass
class PairingConfig:
    cap: int = 13
    variants: int = 6
    n_per_side: int | None = 10_000


@dataclass
class TowerConfig:
    kind: str = "shallow_cnn"
    embedding_dim: int = 128
    weights: str | None = "imagenet"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    loss: str = "bce"
    margin: float = 2.0
    freeze_backbone: bool = False


@dataclass
class RefineConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    n_per_side: int | None = None
    variants: int = 6
    freeze_norm_stats: bool = True


@dataclass
class FewshotConfig:
    ks: list = field(default_factory=lambda: [1, 2, 3])
    k: int = 3  # shot count for single-fold refine/classify/explain
    fold: int = 0
    n_folds: int = 4
    pool_cap: int | None = None


@dataclass
class ClassifyConfig:
    method: str = "avg"
    knn_k: int | None = None
    checkpoint: str = "refined"  # which model classify/explain use: "base" or "refined"


@dataclass
class ExplainConfig:
    k: int | None = None  # defaults to the shot count


@dataclass
class SyntheticConfig:
    n_base: int = 13
    n_heldout: int = 10
    n_novel: int = 12
    base_classes: list = field(default_factory=lambda: ["blob", "stripe", "ring", "speckle", "checker"])
    novel_classes: list = field(default_factory=lambda: ["dots_fine", "dots_mid", "dots_coarse"])
    min_heldout_accuracy: float = 0.85
    min_refinement_gain: float = 0.10


SECTIONS = {
    "data": DataConfig,
    "pairing": PairingConfig,
    "tower": TowerConfig,
    "train": TrainConfig,
    "refine": RefineConfig,
    "fewshot": FewshotConfig,
    "classify": ClassifyConfig,
    "explain": ExplainConfig,
    "synthetic": SyntheticConfig,
}


@dataclass
class RunConfig:
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    tower: TowerConfig = field(default_factory=TowerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def sub_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, *sections: str) -> str:
        """Hash of the seed plus the named sections (all sections if none given)."""
        d = self.to_dict()
        keys = sections or tuple(SECTIONS)
        return fingerprint(self.seed, json.dumps({k: d[k] for k in keys}, sort_keys=True))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        return merge(cfg, doc)


def _coerce(value: Any, current: Any) -> Any:
    """Parse a command-line string into the type of the field's current value."""
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ParameterError(f"expected a boolean, got {value!r}")
    if isinstance(current, (int, float, list)) or current is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            if current is None:
                return value
            raise ParameterError(f"cannot parse {value!r} as {type(current).__name__}") from None
    return value


def merge(cfg: RunConfig, doc: dict) -> RunConfig:
    """Return a copy of ``cfg`` with values from a nested ``doc`` applied."""
    cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name)) for name in SECTIONS})
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        if key not in SECTIONS:
            raise ParameterError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ParameterError(f"config section {key!r} must be an object")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for name, v in value.items():
            if name not in known:
                raise ParameterError(f"unknown config key {key}.{name}")
            setattr(section, name, _coerce(v, getattr(section, name)))
    return cfg


def parse_override(text: str) -> dict:
    """``"train.epochs=5"`` -> ``{"train": {"epochs": "5"}}``."""
    if "=" not in text:
        raise ParameterError(f"override must look like section.key=value, got {text!r}")
    path, value = text.split("=", 1)
    if path == "seed":
        return {"seed": value}
    if path.count(".") != 1:
        raise ParameterError(f"override key must be section.key, got {path!r}")
    section, key = path.split(".")
    return {section: {key: value}}


def load_config(
    path: str | Path | None = None,
    overrides: list[str] = (),
    seed: int | None = None,
    presets: list[dict] = (),
) -> RunConfig:
    """Defaults, then ``presets`` in order, then the file, then overrides and ``seed``."""
    cfg = RunConfig()
    for preset in presets:
        cfg = merge(cfg, preset)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ParameterError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config file {path} is not valid JSON: {exc}") from None
        cfg = merge(cfg, doc)
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    if seed is not None:
        cfg.seed = seed
    return cfg
