"""Twin-tower similarity models.

A single tower module embeds both members of a pair, so weights are tied by
construction.  Two embeddings ``a`` and ``b`` are compared by
``exp(-||a - b||_2)``: 1 for identical embeddings, decaying towards 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import TILE_SIZE, DatasetManifest, Tile
from .errors import CanopyError, ParameterError, ShapeError, ValidationError
from .pairs import PairDataset, validate_pairs
from .seeding import derive_seed

log = logging.getLogger(__name__)

TOWER_KINDS = ("shallow_cnn", "pretrained_lightweight")
LOG_EPS = 1e-7
_DIST_EPS = 1e-12  # keeps sqrt differentiable at zero distance during training

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class TowerSpec:
    """Feature-extractor description.

    ``weights`` only applies to ``pretrained_lightweight``: ``"imagenet"``
    loads torchvision's ImageNet MobileNetV2 weights (downloaded or from the
    torch hub cache), ``None`` starts from random init.
    """

    kind: str = "shallow_cnn"
    embedding_dim: int = 128
    trainable_param_count: int | None = None
    widths: tuple[int, ...] = (32, 64, 128, 256)
    weights: str | None = "imagenet"

    def __post_init__(self):
        if self.kind not in TOWER_KINDS:
            raise ParameterError(f"unknown tower kind {self.kind!r}; expected one of {TOWER_KINDS}")
        if self.embedding_dim < 1:
            raise ParameterError("embedding_dim must be positive")
        object.__setattr__(self, "widths", tuple(self.widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 42
    freeze_backbone: bool = False
    loss: str = "bce"  # or "contrastive"
    margin: float = 2.0  # contrastive loss only
    freeze_norm_stats: bool = False  # keep batch-norm running statistics fixed while fitting

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.loss not in ("bce", "contrastive"):
            raise ParameterError(f"unknown loss {self.loss!r}")

    @classmethod
    def refinement(cls, **overrides) -> "TrainingConfig":
        """Defaults for few-shot refinement: lower learning rate, more epochs, frozen norm statistics."""
        return cls(**{"epochs": 50, "learning_rate": 1e-4, "freeze_norm_stats": True, **overrides})


# ---------------------------------------------------------------------------
# towers


class ShallowTower(nn.Module):
    """Four 3x3 conv blocks (conv, batch norm, ReLU; stride-2 downsampling), then GAP and a dense layer."""

    def __init__(self, embedding_dim: int = 128, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, embedding_dim)

    def forward(self, x):
        return self.head(torch.flatten(self.pool(self.features(x)), 1))


class LightweightTower(nn.Module):
    """MobileNetV2 feature stack (classifier removed), global-pooled and projected."""

    def __init__(self, embedding_dim: int = 128, weights: str | None = "imagenet"):
        super().__init__()
        from torchvision.models import MobileNet_V2_Weights, mobilenet_v2

        tv_weights = MobileNet_V2_Weights.IMAGENET1K_V1 if weights == "imagenet" else None
        try:
            backbone = mobilenet_v2(weights=tv_weights)
        except Exception as exc:  # noqa: BLE001 - network/cache failures surface as many types
            raise CanopyError(
                "could not load ImageNet MobileNetV2 weights (offline?). Place "
                "mobilenet_v2-b0353104.pth in $TORCH_HOME/hub/checkpoints or use weights=None"
            ) from exc
        self.features = backbone.features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(backbone.last_channel, embedding_dim)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        x = (x - self.mean) / self.std
        return self.head(torch.flatten(self.pool(self.features(x)), 1))


def build_tower(spec: TowerSpec, load_pretrained: bool = True) -> nn.Module:
    if spec.kind == "shallow_cnn":
        return ShallowTower(spec.embedding_dim, spec.widths)
    return LightweightTower(spec.embedding_dim, spec.weights if load_pretrained else None)


class SiameseNet(nn.Module):
    """Tower + distance head. ``forward(a, b)`` returns similarity scores in (0, 1]."""

    def __init__(self, tower: nn.Module):
        super().__init__()
        self.tower = tower

    def embed(self, x):
        return self.tower(x)

    def forward(self, a, b):
        n = a.shape[0]
        emb = self.tower(torch.cat([a, b], dim=0))
        d = torch.sqrt(((emb[:n] - emb[n:]) ** 2).sum(dim=1) + _DIST_EPS)
        return torch.exp(-d), d


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoint value


@dataclass(frozen=True)
class ModelCheckpoint:
    """Immutable trained model: tower spec, weights, and how they were produced.

    Each ``lineage`` entry records ``stage``, ``dataset_fingerprint``,
    ``config``, ``epochs`` and the per-epoch mean ``losses``.
    """

    tower_spec: TowerSpec
    weights: dict = field(repr=False)
    lineage: tuple = ()
    seed: int = 0

    @cached_property
    def model(self) -> SiameseNet:
        net = SiameseNet(build_tower(self.tower_spec, load_pretrained=False))
        net.load_state_dict(self.weights)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net


def _snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone().contiguous() for k, v in module.state_dict().items()}


# ---------------------------------------------------------------------------
# similarity and loss (float64 reference path)


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """``exp(-||a - b||_2)`` in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    return math.exp(-float(np.linalg.norm(a - b)))


def pair_loss(score: float, target: int, eps: float = LOG_EPS) -> float:
    """Binary cross-entropy of a similarity score against a 0/1 target."""
    s = min(max(float(score), eps), 1.0 - eps)
    return -(target * math.log(s) + (1 - target) * math.log(1.0 - s))


def pair_loss_grad(a: np.ndarray, b: np.ndarray, target: int, eps: float = LOG_EPS) -> tuple[float, np.ndarray]:
    """Loss of ``pair_loss(similarity(a, b), target)`` and its gradient w.r.t. ``a``.

    With s = exp(-d): dL/dd = t - (1 - t) * s / (1 - s), dd/da = (a - b) / d.
    The gradient is zero where the clamp is active.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a - b
    d = float(np.linalg.norm(diff))
    s = math.exp(-d)
    loss = pair_loss(s, target, eps)
    if d == 0.0 or not eps < s < 1.0 - eps:
        return loss, np.zeros_like(a)
    dl_dd = target - (1 - target) * s / (1.0 - s)
    return loss, dl_dd * diff / d


def _torch_loss(score, dist, target, config: TrainingConfig):
    if config.loss == "bce":
        s = score.clamp(LOG_EPS, 1.0 - LOG_EPS)
        return -(target * torch.log(s) + (1 - target) * torch.log(1 - s)).mean()
    hinge = torch.clamp(config.margin - dist, min=0.0)
    return (target * dist**2 + (1 - target) * hinge**2).mean()


# ---------------------------------------------------------------------------
# embedding


def tile_tensor(tiles: Sequence[Tile]) -> torch.Tensor:
    """Stack tiles as an ``N x 3 x H x W`` float32 tensor scaled to [0, 1]."""
    for t in tiles:
        if t.shape != (TILE_SIZE, TILE_SIZE):
            raise ShapeError(f"tile {t.tile_id!r} is {t.shape}, expected {TILE_SIZE}x{TILE_SIZE}; normalize first")
    arr = np.stack([t.pixels for t in tiles]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def embed(tile: Tile, checkpoint: ModelCheckpoint) -> np.ndarray:
    """Embed one tile (inference mode); returns a float64 vector."""
    with torch.inference_mode():
        vec = checkpoint.model.embed(tile_tensor([tile]))[0]
    return vec.double().numpy().copy()


def embed_tiles(tiles: Sequence[Tile], checkpoint: ModelCheckpoint) -> dict[str, np.ndarray]:
    """Embed tiles one at a time so every vector depends only on its own pixels."""
    return {t.tile_id: embed(t, checkpoint) for t in tiles}


# ---------------------------------------------------------------------------
# training


def _fit(net: SiameseNet, pairs: PairDataset, manifest: DatasetManifest, config: TrainingConfig) -> dict:
    ids = sorted(pairs.tile_ids())
    pos = {tid: i for i, tid in enumerate(ids)}
    images = tile_tensor([manifest.get(tid) for tid in ids])
    ia = torch.tensor([pos[p.tile_a_id] for p in pairs.pairs])
    ib = torch.tensor([pos[p.tile_b_id] for p in pairs.pairs])
    tgt = torch.tensor([float(p.target) for p in pairs.pairs])

    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle"))
    n = len(pairs.pairs)
    losses = []
    steps = 0
    seen = 0
    net.train()
    if config.freeze_norm_stats:
        # a handful of support tiles would otherwise overwrite statistics learned on the base classes
        for m in net.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            score, dist = net(images[ia[idx]], images[ib[idx]])
            loss = _torch_loss(score, dist, tgt[idx], config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            steps += 1
            seen += len(idx)
        losses.append(total / n)
        log.info("epoch %d/%d  mean loss %.5f", epoch + 1, config.epochs, losses[-1])
    net.eval()
    return {"losses": losses, "optimizer_steps": steps, "pairs_seen": seen}


def _lineage_entry(stage: str, pairs: PairDataset, config: TrainingConfig, history: dict) -> dict:
    return {
        "stage": stage,
        "dataset_fingerprint": pairs.fingerprint,
        "config": asdict(config),
        "epochs": config.epochs,
        **history,
    }


def _set_backbone_trainable(net: SiameseNet, spec: TowerSpec, config: TrainingConfig) -> None:
    if spec.kind == "pretrained_lightweight" and config.freeze_backbone:
        for p in net.tower.features.parameters():
            p.requires_grad_(False)


def init_checkpoint(spec: TowerSpec, seed: int = 0) -> ModelCheckpoint:
    """An untrained checkpoint with seeded initial weights."""
    torch.manual_seed(derive_seed(seed, "init"))
    net = SiameseNet(build_tower(spec))
    spec = replace(spec, trainable_param_count=count_trainable(net))
    return ModelCheckpoint(tower_spec=spec, weights=_snapshot(net), lineage=(), seed=seed)


def train_base(
    pairs: PairDataset, tiles: DatasetManifest, spec: TowerSpec, config: TrainingConfig
) -> ModelCheckpoint:
    """Train a fresh twin-tower model on balanced pairs."""
    if not pairs.pairs:
        raise ValidationError("empty pair dataset")
    validate_pairs(pairs, tiles)
    torch.manual_seed(derive_seed(config.seed, "init"))
    net = SiameseNet(build_tower(spec))
    _set_backbone_trainable(net, spec, config)
    spec = replace(spec, trainable_param_count=count_trainable(net))
    log.info("training %s tower (%d trainable params) on %d pairs", spec.kind, spec.trainable_param_count, len(pairs))
    history = _fit(net, pairs, tiles, config)
    return ModelCheckpoint(
        tower_spec=spec,
        weights=_snapshot(net),
        lineage=(_lineage_entry("base", pairs, config, history),),
        seed=config.seed,
    )


def refine(
    base: ModelCheckpoint, support_pairs: PairDataset, tiles: DatasetManifest, config: TrainingConfig
) -> ModelCheckpoint:
    """Continue training a copy of ``base`` on support pairs; ``base`` is left untouched."""
    if not support_pairs.pairs:
        raise ValidationError("refinement needs at least one support pair")
    validate_pairs(support_pairs, tiles)
    torch.manual_seed(derive_seed(config.seed, "refine-init"))
    net = SiameseNet(build_tower(base.tower_spec, load_pretrained=False))
    net.load_state_dict({k: v.clone() for k, v in base.weights.items()})
    _set_backbone_trainable(net, base.tower_spec, config)
    history = _fit(net, support_pairs, tiles, config)
    return ModelCheckpoint(
        tower_spec=base.tower_spec,
        weights=_snapshot(net),
        lineage=tuple(base.lineage) + (_lineage_entry("refine", support_pairs, config, history),),
        seed=base.seed,
    )
