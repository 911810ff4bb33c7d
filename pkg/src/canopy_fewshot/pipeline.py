"""Stage functions that turn a :class:`RunConfig` into in-memory artifacts.

The command-line layer wraps these with file I/O; the synthetic acceptance
run chains them end to end.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import replace

import numpy as np

from .augment import expand_candidates
from .classification import ClassificationReport, classify, evaluate, score_embeddings
from .config import RunConfig
from .dataset import DatasetManifest, cap_candidates, normalize_manifest
from .fewshot import FoldPlan, SweepResult, build_fold_plan, cap_fewshot_pool, merged_table, run_sweep
from .pairs import PairDataset, build_pair_dataset
from .siamese import ModelCheckpoint, TowerSpec, TrainingConfig, embed, train_base
from .synthetic import make_synthetic_manifest

log = logging.getLogger(__name__)

# Desk-scale budget for the synthetic run; the library defaults match the
# full-size protocol and take hours on a CPU.
SYNTHETIC_PRESET = {
    "pairing": {"n_per_side": 500},
    "train": {"epochs": 8, "learning_rate": 1e-3},
    "refine": {"epochs": 5, "n_per_side": 150},
}
QUICK_PRESET = {
    "pairing": {"n_per_side": 60},
    "train": {"epochs": 1},
    "refine": {"epochs": 1, "n_per_side": 20},
    "fewshot": {"n_folds": 2},
}


def tower_spec(cfg: RunConfig) -> TowerSpec:
    return TowerSpec(kind=cfg.tower.kind, embedding_dim=cfg.tower.embedding_dim, weights=cfg.tower.weights)


def training_config(cfg: RunConfig) -> TrainingConfig:
    t = cfg.train
    return TrainingConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        seed=cfg.sub_seed("train"),
        freeze_backbone=t.freeze_backbone,
        loss=t.loss,
        margin=t.margin,
    )


def refinement_config(cfg: RunConfig) -> TrainingConfig:
    r = cfg.refine
    base = training_config(cfg)
    return replace(
        base,
        epochs=r.epochs,
        batch_size=r.batch_size,
        learning_rate=r.learning_rate,
        seed=cfg.sub_seed("refine"),
        freeze_norm_stats=r.freeze_norm_stats,
    )


def prepare(raw: DatasetManifest, cfg: RunConfig) -> tuple[DatasetManifest, list[dict]]:
    return normalize_manifest(raw, cfg.data.target_gsd_cm, cfg.data.tile_size)


def base_candidates(prepared: DatasetManifest, cfg: RunConfig) -> DatasetManifest:
    capped = cap_candidates(prepared, cfg.pairing.cap, cfg.sub_seed("cap"))
    return expand_candidates(capped, cfg.pairing.variants, cfg.sub_seed("augment"))


def base_pairs(candidates: DatasetManifest, cfg: RunConfig) -> PairDataset:
    return build_pair_dataset(candidates, cfg.pairing.n_per_side, cfg.sub_seed("pairs"))


def train(pairs: PairDataset, candidates: DatasetManifest, cfg: RunConfig) -> ModelCheckpoint:
    return train_base(pairs, candidates, tower_spec(cfg), training_config(cfg))


def fold_plan(prepared: DatasetManifest, cfg: RunConfig, k: int) -> FoldPlan:
    pool = prepared
    if cfg.fewshot.pool_cap is not None:
        pool = cap_fewshot_pool(prepared, cfg.fewshot.pool_cap, cfg.sub_seed("pool"))
    return build_fold_plan(pool, k, cfg.fewshot.n_folds, cfg.sub_seed("folds"))


def sweep(base: ModelCheckpoint, prepared: DatasetManifest, cfg: RunConfig) -> list[SweepResult]:
    results = []
    for k in cfg.fewshot.ks:
        plan = fold_plan(prepared, cfg, k)
        results.append(
            run_sweep(
                base,
                plan,
                refinement_config(cfg),
                prepared,
                method=cfg.classify.method,
                knn_k=cfg.classify.knn_k,
                explain_k=cfg.explain.k,
                refine_pairs_per_side=cfg.refine.n_per_side,
                variants_per_tile=cfg.refine.variants,
            )
        )
    return results


def heldout_evaluation(ck: ModelCheckpoint, prepared: DatasetManifest, cfg: RunConfig) -> ClassificationReport:
    """Classify ``query``-role tiles of the base classes against every base training original."""
    supports = [
        (t.tile_id, t.class_label, embed(t, ck)) for t in prepared.tiles_with_role("base_train")
    ]
    queries = prepared.tiles_with_role("query")
    preds = []
    for q in queries:
        recs = score_embeddings(q.tile_id, embed(q, ck), supports)
        preds.append(classify(recs, cfg.classify.method, cfg.classify.knn_k, true_class=q.class_label))
    return evaluate(preds)


def _check(name: str, value, threshold: str, passed: bool) -> dict:
    return {"name": name, "value": value, "threshold": threshold, "passed": bool(passed)}


def monotone_within_std(means: list[float], stds: list[float]) -> bool:
    """Each step ``k -> k+1`` may drop by at most the larger of the two fold stds."""
    return all(b >= a - max(sa, sb) for a, b, sa, sb in zip(means, means[1:], stds, stds[1:]))


def run_synthetic(cfg: RunConfig, quick: bool = False) -> dict:
    """Generate the synthetic suite, run every stage and return the acceptance report."""
    timing = {}
    t0 = time.perf_counter()
    s = cfg.synthetic
    raw = make_synthetic_manifest(
        cfg.sub_seed("synthetic"), s.n_base, s.n_heldout, s.n_novel, s.base_classes, s.novel_classes
    )
    prepared, _ = prepare(raw, cfg)
    candidates = base_candidates(prepared, cfg)
    pairs = base_pairs(candidates, cfg)
    timing["data_s"] = time.perf_counter() - t0

    base = train(pairs, candidates, cfg)
    timing["train_s"] = time.perf_counter() - t0 - timing["data_s"]
    heldout = heldout_evaluation(base, prepared, cfg)

    t1 = time.perf_counter()
    results = sweep(base, prepared, cfg)
    timing["sweep_s"] = time.perf_counter() - t1

    by_k = {r.k: r for r in results}
    f1 = {arm: {} for arm in ("zero_shot", "refined")}
    f1_std = {arm: {} for arm in ("zero_shot", "refined")}
    for r in results:
        for arm in f1:
            mean, std = r.arms[arm].aggregate()
            f1[arm][r.k] = mean["f1"]
            f1_std[arm][r.k] = std["f1"]

    ks = sorted(by_k)
    k_top = max(ks)
    gain = f1["refined"][k_top] - f1["zero_shot"][k_top]
    refined_means = [f1["refined"][k] for k in ks]
    refined_stds = [f1_std["refined"][k] for k in ks]
    losses = base.lineage[0]["losses"]

    checks = [
        _check(
            "pair_counts",
            {"enumerated": pairs.enumerated, "sampled": pairs.counts},
            "similar/dissimilar enumerated from 5 classes x 13 x 7 candidates",
            len(candidates.class_roster["base_train"]) != 5
            or pairs.enumerated == {"similar": 20475, "dissimilar": 82810},
        ),
        _check("base_loss_decreases", [losses[0], losses[-1]], "last < first", losses[-1] < losses[0]),
        _check(
            "base_heldout_accuracy",
            heldout.weighted_accuracy,
            f">= {s.min_heldout_accuracy}",
            heldout.weighted_accuracy >= s.min_heldout_accuracy,
        ),
        _check(
            "refinement_gain",
            gain,
            f"F1(refined, k={k_top}) - F1(zero-shot, k={k_top}) >= {s.min_refinement_gain}",
            gain >= s.min_refinement_gain,
        ),
        _check(
            "f1_monotone_in_k",
            dict(zip(ks, refined_means)),
            "refined F1 non-decreasing in k within one fold std",
            monotone_within_std(refined_means, refined_stds),
        ),
    ]

    headline = {
        "base_final_loss": losses[-1],
        "base_heldout_accuracy": heldout.weighted_accuracy,
        "base_heldout_macro_f1": heldout.macro["f1"],
    }
    for arm in f1:
        for k in ks:
            headline[f"{arm}_k{k}_f1"] = f1[arm][k]
            headline[f"{arm}_k{k}_f1_std"] = f1_std[arm][k]
        for key in ("c_cor", "c_cty", "c_cst"):
            mean, _ = by_k[k_top].arms[arm].aggregate()
            headline[f"{arm}_k{k_top}_{key}"] = mean[key]
    headline["refinement_gain"] = gain

    timing["total_s"] = time.perf_counter() - t0
    if not all(math.isfinite(v) for v in losses):
        log.warning("non-finite training loss encountered")
    return {
        "acceptance_grade": not quick,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "pairs": {"enumerated": pairs.enumerated, "sampled": pairs.counts, "fingerprint": pairs.fingerprint},
        "base": {"losses": losses, "heldout": heldout.to_json(), "tower": base.tower_spec.to_dict()},
        "sweeps": [r.to_json() for r in results],
        "table": merged_table(results),
        "headline": headline,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
        "timing": timing,
        "_checkpoint": base,
        "_manifest": prepared,
        "_results": results,
    }


def public_report(report: dict) -> dict:
    """Drop in-memory objects so the report is JSON-serializable."""
    return {k: v for k, v in report.items() if not k.startswith("_")}


def embedding_digest(ck: ModelCheckpoint, tiles) -> np.ndarray:
    """Stacked embeddings of ``tiles``; used to compare two trained models."""
    return np.stack([embed(t, ck) for t in tiles])
