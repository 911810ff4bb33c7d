"""k-shot support/test partitioning, support refinement pairs and fold sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .augment import DEFAULT_VARIANTS, expand_candidates
from .classification import Prediction, classify, evaluate, score_embeddings
from .dataset import DatasetManifest, cap_candidates
from .errors import ParameterError, ValidationError
from .explanation import ExplanationRecord, compute_metrics, continuity_details, select_explanation
from .pairs import PairDataset, build_pair_dataset
from .seeding import derive_seed
from .siamese import ModelCheckpoint, TrainingConfig, embed, refine

log = logging.getLogger(__name__)

METRIC_KEYS = ("precision", "recall", "f1", "accuracy", "c_cor", "c_cty", "c_cst")


@dataclass(frozen=True)
class SupportSet:
    shots_k: int
    members: dict  # class label -> tuple of k tile ids

    def __post_init__(self):
        members = {c: tuple(ids) for c, ids in self.members.items()}
        for c, ids in members.items():
            if len(ids) != self.shots_k:
                raise ValidationError(f"class {c!r} has {len(ids)} support tiles, expected {self.shots_k}")
        object.__setattr__(self, "members", members)

    @property
    def tile_ids(self) -> list[str]:
        return [t for ids in self.members.values() for t in ids]

    def to_json(self) -> dict:
        return {"k": self.shots_k, "members": {c: list(v) for c, v in self.members.items()}}


@dataclass(frozen=True)
class Fold:
    support: SupportSet
    test_ids: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.support.tile_ids) & set(self.test_ids)
        if overlap:
            raise ValidationError(f"support and test overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    n_folds: int
    folds: tuple[Fold, ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "folds": [{"support": f.support.to_json(), "test": list(f.test_ids)} for f in self.folds],
        }


def cap_fewshot_pool(manifest: DatasetManifest, pool_cap: int, seed: int) -> DatasetManifest:
    """Randomly keep at most ``pool_cap`` tiles per few-shot class."""
    return cap_candidates(manifest, pool_cap, seed, role="fewshot")


def build_fold_plan(
    fewshot_manifest: DatasetManifest,
    k: int,
    n_folds: int = 4,
    seed: int = 0,
    max_k: int = 3,
    role: str = "fewshot",
) -> FoldPlan:
    """Alternate support and test tiles across ``n_folds`` folds.

    Each class's tiles are shuffled once (seeded per class). Fold ``f`` takes
    a cyclic window of ``k`` tiles starting at ``f * k`` as support, moving to
    the next start whenever that window repeats an earlier fold's selection.
    A class of ``m`` tiles has ``m`` distinct windows; beyond that, windows
    repeat.
    """
    if not 1 <= k <= max_k:
        raise ParameterError(f"k must be in [1, {max_k}], got {k}")
    if n_folds < 1:
        raise ParameterError(f"n_folds must be >= 1, got {n_folds}")
    groups = fewshot_manifest.by_class(role)
    if not groups:
        raise ValidationError(f"no {role!r} classes in manifest")
    shuffled: dict[str, list[str]] = {}
    for label, tiles in groups.items():
        if len(tiles) < k + 1:
            raise ValidationError(f"class {label!r} has {len(tiles)} tiles; {k}-shot needs at least {k + 1}")
        perm = np.random.default_rng(derive_seed(seed, "folds", label)).permutation(len(tiles))
        shuffled[label] = [tiles[i].tile_id for i in perm]

    used: dict[str, set] = {c: set() for c in shuffled}
    folds = []
    for f in range(n_folds):
        members = {}
        test = []
        for label, ids in shuffled.items():
            m = len(ids)
            start = (f * k) % m
            for shift in range(m):
                window = frozenset((start + shift + j) % m for j in range(k))
                if window not in used[label]:
                    start = (start + shift) % m
                    break
            else:
                log.warning("class %r: fold %d repeats an earlier support selection", label, f)
            window_idx = [(start + j) % m for j in range(k)]
            used[label].add(frozenset(window_idx))
            members[label] = tuple(ids[i] for i in window_idx)
            chosen = set(members[label])
            test.extend(t for t in ids if t not in chosen)
        folds.append(Fold(SupportSet(k, members), tuple(test)))
    return FoldPlan(k=k, n_folds=n_folds, folds=tuple(folds), seed=seed)


def support_refinement_pairs(
    support: SupportSet,
    manifest: DatasetManifest,
    aug_seed: int,
    variants_per_tile: int = DEFAULT_VARIANTS,
    n_per_side: int | None = None,
) -> tuple[PairDataset, DatasetManifest]:
    """Augment the support tiles and build balanced refinement pairs.

    Returns the pairs and the expanded manifest holding the augmented tiles
    they reference. ``n_per_side=None`` balances to the smaller side.
    """
    ids = support.tile_ids
    if not ids:
        raise ValidationError("empty support set")
    if len(support.members) < 2:
        raise ValidationError(
            "refinement pairs need at least two support classes (no dissimilar pairs otherwise)"
        )
    sub = DatasetManifest([manifest.get(t) for t in ids], {t: "fewshot" for t in ids})
    expanded = expand_candidates(sub, variants_per_tile, aug_seed, role="fewshot")
    pairs = build_pair_dataset(expanded, n_per_side, derive_seed(aug_seed, "pairs"), role="fewshot")
    return pairs, expanded


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ArmResult:
    folds: list = field(default_factory=list)  # per-fold metric dicts
    predictions: list = field(default_factory=list)  # per fold: list[Prediction]
    explanations: list = field(default_factory=list)  # per fold: list[ExplanationRecord]

    def aggregate(self) -> tuple[dict, dict]:
        mean, std = {}, {}
        for key in METRIC_KEYS:
            vals = [f[key] for f in self.folds if f.get(key) is not None]
            if not vals:
                mean[key] = std[key] = None
                continue
            mean[key] = math.fsum(vals) / len(vals)
            std[key] = float(np.std(vals))
        return mean, std

    def to_json(self) -> dict:
        mean, std = self.aggregate()
        return {"folds": self.folds, "mean": mean, "std": std}


@dataclass
class SweepResult:
    k: int
    n_folds: int
    method: str
    arms: dict

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "n_folds": self.n_folds,
            "method": self.method,
            "arms": {name: arm.to_json() for name, arm in self.arms.items()},
        }


def evaluate_fold(
    checkpoint: ModelCheckpoint,
    fold: Fold,
    manifest: DatasetManifest,
    method: str = "avg",
    knn_k: int | None = None,
    explain_k: int | None = None,
    perturb_seed: int = 0,
) -> tuple[dict, list[Prediction], list[ExplanationRecord]]:
    """Classify and explain every test tile of ``fold`` with ``checkpoint``."""
    k = fold.support.shots_k
    knn_k = knn_k or k
    explain_k = explain_k or k
    sup = [(sid, cls, embed(manifest.get(sid), checkpoint)) for cls, ids in fold.support.members.items() for sid in ids]
    vecs = {sid: v for sid, _, v in sup}
    preds, expls = [], []
    queries = [manifest.get(t) for t in fold.test_ids]
    for q in queries:
        recs = score_embeddings(q.tile_id, embed(q, checkpoint), sup)
        pred = classify(recs, method, knn_k, true_class=q.class_label)
        preds.append(pred)
        expls.append(select_explanation(recs, explain_k, pred))
    cty, cty_rows = continuity_details(
        queries, fold.support, checkpoint, explain_k, perturb_seed, manifest, support_vectors=vecs
    )
    report = evaluate(preds)
    xai = compute_metrics(expls, [r["continuity"] for r in cty_rows])
    metrics = {
        **report.headline("macro"),
        "weighted_f1": report.weighted["f1"],
        "c_cor": xai.c_cor,
        "c_cty": xai.c_cty,
        "c_cst": xai.c_cst,
        "n_test": len(queries),
    }
    return metrics, preds, expls


def run_sweep(
    base: ModelCheckpoint,
    plan: FoldPlan,
    config: TrainingConfig,
    manifest: DatasetManifest,
    method: str = "avg",
    knn_k: int | None = None,
    explain_k: int | None = None,
    refine_pairs_per_side: int | None = None,
    variants_per_tile: int = DEFAULT_VARIANTS,
) -> SweepResult:
    """Zero-shot and refined arms over every fold of ``plan``.

    Both arms see the same support/test partition. Each fold refines a fresh
    copy of ``base``; augmentation and perturbation seeds derive from the
    plan seed and fold index.
    """
    arms = {"zero_shot": ArmResult(), "refined": ArmResult()}
    for i, fold in enumerate(plan.folds):
        perturb_seed = derive_seed(plan.seed, "perturb", i)
        runs = [("zero_shot", base)]
        pairs, expanded = support_refinement_pairs(
            fold.support,
            manifest,
            derive_seed(plan.seed, "fold-aug", i),
            variants_per_tile=variants_per_tile,
            n_per_side=refine_pairs_per_side,
        )
        fold_config = replace(config, seed=derive_seed(config.seed, "fold", i))
        refined = refine(base, pairs, expanded, fold_config)
        runs.append(("refined", refined))
        for name, ck in runs:
            metrics, preds, expls = evaluate_fold(ck, fold, manifest, method, knn_k, explain_k, perturb_seed)
            metrics["fold"] = i
            arms[name].folds.append(metrics)
            arms[name].predictions.append(preds)
            arms[name].explanations.append(expls)
        log.info(
            "k=%d fold %d: F1 zero-shot %.3f refined %.3f",
            plan.k, i, arms["zero_shot"].folds[-1]["f1"], arms["refined"].folds[-1]["f1"],
        )
    return SweepResult(k=plan.k, n_folds=plan.n_folds, method=method, arms=arms)


def merged_table(results: Sequence[SweepResult]) -> list[dict]:
    """One row per (k, arm) with mean/std of the four classification metrics."""
    rows = []
    for res in results:
        for name, arm in res.arms.items():
            mean, std = arm.aggregate()
            row = {"k": res.k, "arm": name}
            for key in ("precision", "recall", "f1", "accuracy", "c_cor", "c_cty", "c_cst"):
                row[key] = mean[key]
                row[f"{key}_std"] = std[key]
            rows.append(row)
    return rows
