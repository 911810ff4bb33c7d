"""Similarity scoring of queries against a support set and the two decision rules.

Method ``avg`` picks the class with the highest mean similarity; method
``knn`` takes a majority vote among the K most similar supports.  Both break
ties by the higher maximum individual score, then by smallest class label.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .dataset import DatasetManifest, Tile
from .errors import ParameterError, ValidationError
from .siamese import ModelCheckpoint, embed, similarity

if TYPE_CHECKING:
    from .fewshot import SupportSet

METHODS = ("avg", "knn")


@dataclass(frozen=True, slots=True)
class SimilarityRecord:
    query_id: str
    support_id: str
    support_class: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"similarity score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Prediction:
    query_id: str
    predicted_class: str
    method: str
    knn_k: int | None = None
    class_aggregates: dict = field(default_factory=dict)
    true_class: str | None = None

    @property
    def correct(self) -> bool | None:
        return None if self.true_class is None else self.predicted_class == self.true_class

    def to_json(self) -> dict:
        return {
            "query": self.query_id,
            "pred": self.predicted_class,
            "true": self.true_class,
            "method": self.method,
            "knn_k": self.knn_k,
            "aggregates": self.class_aggregates,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Prediction":
        return cls(
            query_id=rec["query"],
            predicted_class=rec["pred"],
            method=rec["method"],
            knn_k=rec.get("knn_k"),
            class_aggregates=dict(rec.get("aggregates", {})),
            true_class=rec.get("true"),
        )


@dataclass(frozen=True)
class ClassificationReport:
    """Per-class and averaged precision/recall/F1.

    ``macro`` is the unweighted class mean, ``weighted`` weights each class by
    its true-sample count. ``weighted_accuracy`` is the overall fraction
    correct (equivalently support-weighted recall).
    """

    classes: list
    per_class: dict
    macro: dict
    weighted: dict
    weighted_accuracy: float
    confusion: list
    n_samples: int

    def headline(self, average: str = "macro") -> dict:
        avg = self.macro if average == "macro" else self.weighted
        return {
            "precision": avg["precision"],
            "recall": avg["recall"],
            "f1": avg["f1"],
            "accuracy": self.weighted_accuracy,
        }

    def to_json(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": self.per_class,
            "macro": self.macro,
            "weighted": self.weighted,
            "weighted_accuracy": self.weighted_accuracy,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
        }


# ---------------------------------------------------------------------------
# scoring


def score_embeddings(
    query_id: str, query_vec: np.ndarray, supports: Sequence[tuple[str, str, np.ndarray]]
) -> list[SimilarityRecord]:
    """Records for one query given ``(support_id, support_class, vector)`` triples."""
    if not supports:
        raise ValidationError("empty support set")
    return [SimilarityRecord(query_id, sid, cls, similarity(query_vec, vec)) for sid, cls, vec in supports]


def support_items(support: "SupportSet", manifest: DatasetManifest) -> list[tuple[str, str]]:
    """``(tile_id, class)`` for every support member, in class then shot order."""
    items = [(tid, cls) for cls, ids in support.members.items() for tid in ids]
    for tid, _ in items:
        if tid not in manifest:
            raise ValidationError(f"support tile {tid!r} not in manifest")
    return items


def score_query(
    query: Tile, support: "SupportSet", checkpoint: ModelCheckpoint, manifest: DatasetManifest
) -> list[SimilarityRecord]:
    """One similarity record per support tile."""
    items = support_items(support, manifest)
    if not items:
        raise ValidationError("empty support set")
    qv = embed(query, checkpoint)
    return score_embeddings(
        query.tile_id, qv, [(sid, cls, embed(manifest.get(sid), checkpoint)) for sid, cls in items]
    )


# ---------------------------------------------------------------------------
# decision rules


def _rank(records: Iterable[SimilarityRecord]) -> list[SimilarityRecord]:
    """Descending score; equal scores ordered by support id."""
    return sorted(records, key=lambda r: (-r.score, r.support_id))


def _break_ties(candidates: list[str], best_score: dict[str, float]) -> str:
    return min(candidates, key=lambda c: (-best_score[c], c))


def classify_avg(records: Sequence[SimilarityRecord], true_class: str | None = None) -> Prediction:
    """Highest mean similarity per support class wins."""
    if not records:
        raise ValidationError("no similarity records")
    by_class: dict[str, list[float]] = {}
    for r in records:
        by_class.setdefault(r.support_class, []).append(r.score)
    means = {c: math.fsum(v) / len(v) for c, v in by_class.items()}
    best = {c: max(v) for c, v in by_class.items()}
    top = max(means.values())
    winner = _break_ties([c for c, m in means.items() if m == top], best)
    return Prediction(
        query_id=records[0].query_id,
        predicted_class=winner,
        method="avg",
        class_aggregates=means,
        true_class=true_class,
    )


def classify_knn(records: Sequence[SimilarityRecord], K: int, true_class: str | None = None) -> Prediction:
    """Majority class among the ``K`` highest-scoring supports."""
    if not 1 <= K <= len(records):
        raise ParameterError(f"K must be in [1, {len(records)}], got {K}")
    top = _rank(records)[:K]
    votes = Counter(r.support_class for r in top)
    best: dict[str, float] = {}
    for r in top:
        best[r.support_class] = max(best.get(r.support_class, 0.0), r.score)
    most = max(votes.values())
    winner = _break_ties([c for c, v in votes.items() if v == most], best)
    return Prediction(
        query_id=records[0].query_id,
        predicted_class=winner,
        method="knn",
        knn_k=K,
        class_aggregates={c: float(v) for c, v in votes.items()},
        true_class=true_class,
    )


def classify(
    records: Sequence[SimilarityRecord], method: str = "avg", K: int | None = None, true_class: str | None = None
) -> Prediction:
    if method == "avg":
        return classify_avg(records, true_class)
    if method == "knn":
        if K is None:
            raise ParameterError("knn needs K")
        return classify_knn(records, K, true_class)
    raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# evaluation


def _prf(tp: int, fp: int, fn: int) -> dict:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f}


def evaluate(predictions: Sequence[Prediction]) -> ClassificationReport:
    """One-vs-rest metrics over the union of true and predicted classes."""
    if not predictions:
        raise ValidationError("no predictions to evaluate")
    for p in predictions:
        if p.true_class is None:
            raise ValidationError(f"prediction for {p.query_id!r} has no true class")
    classes = sorted({p.true_class for p in predictions} | {p.predicted_class for p in predictions})
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)  # rows: truth, cols: prediction
    for p in predictions:
        cm[pos[p.true_class], pos[p.predicted_class]] += 1

    per_class = {}
    support = cm.sum(axis=1)
    for c, i in pos.items():
        tp = int(cm[i, i])
        fp = int(cm[:, i].sum()) - tp
        fn = int(cm[i, :].sum()) - tp
        if support[i] and tp + fp == 0:
            warnings.warn(f"class {c!r} is never predicted; its precision is set to 0", stacklevel=2)
        per_class[c] = {**_prf(tp, fp, fn), "support": int(support[i])}

    keys = ("precision", "recall", "f1")
    macro = {k: float(np.mean([per_class[c][k] for c in classes])) for k in keys}
    n = int(support.sum())
    weighted = {k: float(sum(per_class[c][k] * per_class[c]["support"] for c in classes) / n) for k in keys}
    accuracy = float(np.trace(cm)) / n
    return ClassificationReport(
        classes=classes,
        per_class=per_class,
        macro=macro,
        weighted=weighted,
        weighted_accuracy=accuracy,
        confusion=cm.tolist(),
        n_samples=n,
    )


def save_predictions(predictions: Iterable[Prediction], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_json()) + "\n")
    return path


def load_predictions(path: str | Path) -> list[Prediction]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"predictions file not found: {path}")
    return [Prediction.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
