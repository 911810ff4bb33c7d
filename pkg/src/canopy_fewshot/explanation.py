"""Case-based explanations and their content-quality metrics.

An explanation for a query is the K support tiles with the highest similarity
over the whole support set (not per class), so a low-scoring support of
another class can appear in it.  Three scores summarize a batch:

correctness
    mean over queries of the fraction of selected supports whose class equals
    the prediction, counted only when the prediction is right.
continuity
    mean over queries of ``|S & S'| / K`` where ``S'`` is the explanation of a
    randomly augmented copy of the query.
contrastivity
    mean over queries of ``-sum p(s) log2 p(s)`` over the query's selected
    supports, where ``p(s)`` is the share of all N*K selections taken by
    support ``s``; normalized by ``log2 K``. Undefined for K = 1.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .augment import AugmentationSpec, augment, random_perturbation
from .classification import Prediction, SimilarityRecord, _rank, score_embeddings, support_items
from .dataset import DatasetManifest, Tile
from .errors import ParameterError, ValidationError
from .seeding import derive_seed
from .siamese import ModelCheckpoint, embed


@dataclass(frozen=True)
class ExplanationRecord:
    query_id: str
    selected: tuple  # ((support_id, support_class, score), ...) by descending score
    predicted_class: str
    true_class: str | None

    def __post_init__(self):
        sel = tuple(tuple(s) for s in self.selected)
        scores = [s[2] for s in sel]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError(f"explanation for {self.query_id!r} is not sorted by descending score")
        object.__setattr__(self, "selected", sel)

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def support_ids(self) -> list[str]:
        return [s[0] for s in self.selected]

    def to_json(self) -> dict:
        return {
            "query": self.query_id,
            "selected": [{"id": s, "class": c, "score": sc} for s, c, sc in self.selected],
            "pred": self.predicted_class,
            "true": self.true_class,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ExplanationRecord":
        return cls(
            query_id=rec["query"],
            selected=tuple((s["id"], s["class"], s["score"]) for s in rec["selected"]),
            predicted_class=rec["pred"],
            true_class=rec.get("true"),
        )


@dataclass(frozen=True)
class XaiMetricsReport:
    """Aggregate explanation metrics; ``c_cst`` is ``None`` when K = 1.

    ``pool_selection_entropy_bits`` is a diagnostic only: the entropy of the
    selection-frequency distribution over all supports ever selected.
    """

    c_cor: float
    c_cty: float | None
    c_cst: float | None
    k: int
    n_samples: int
    per_sample: list = field(default_factory=list)
    pool_selection_entropy_bits: float | None = None

    def to_json(self) -> dict:
        return {
            "c_cor": self.c_cor,
            "c_cty": self.c_cty,
            "c_cst": self.c_cst,
            "k": self.k,
            "n": self.n_samples,
            "per_sample": self.per_sample,
            "aux": {"pool_selection_entropy_bits": self.pool_selection_entropy_bits},
        }


def select_explanation(records: Sequence[SimilarityRecord], K: int, prediction: Prediction) -> ExplanationRecord:
    """Top-``K`` supports across the entire support set; ties by support id."""
    if not 1 <= K <= len(records):
        raise ParameterError(f"explanation size K must be in [1, {len(records)}], got {K}")
    top = _rank(records)[:K]
    return ExplanationRecord(
        query_id=prediction.query_id,
        selected=tuple((r.support_id, r.support_class, r.score) for r in top),
        predicted_class=prediction.predicted_class,
        true_class=prediction.true_class,
    )


# ---------------------------------------------------------------------------
# correctness


def correctness_per_sample(explanations: Sequence[ExplanationRecord]) -> list[float]:
    out = []
    for e in explanations:
        if e.true_class is None:
            raise ValidationError(f"explanation for {e.query_id!r} has no true class")
        if e.predicted_class != e.true_class or e.k == 0:
            out.append(0.0)
        else:
            out.append(sum(c == e.predicted_class for _, c, _ in e.selected) / e.k)
    return out


def correctness(explanations: Sequence[ExplanationRecord]) -> float:
    if not explanations:
        raise ValidationError("correctness of an empty explanation list is undefined")
    return math.fsum(correctness_per_sample(explanations)) / len(explanations)


# ---------------------------------------------------------------------------
# continuity


def continuity_from_selections(original: Sequence[Sequence[str]], perturbed: Sequence[Sequence[str]]) -> list[float]:
    """Per-query fraction of the original selection that survives perturbation."""
    if len(original) != len(perturbed):
        raise ValidationError("original and perturbed selection lists differ in length")
    out = []
    for s, sp in zip(original, perturbed):
        if len(s) != len(sp) or not s:
            raise ValidationError("selections must be non-empty and of equal size K")
        out.append(len(set(s) & set(sp)) / len(s))
    return out


def continuity_from_records(
    original: Sequence[Sequence[SimilarityRecord]], perturbed: Sequence[Sequence[SimilarityRecord]], K: int
) -> float:
    """Continuity computed straight from per-query score tables."""
    if not original:
        raise ValidationError("continuity of an empty query list is undefined")
    sel = [[r.support_id for r in _rank(recs)[:K]] for recs in original]
    sel_p = [[r.support_id for r in _rank(recs)[:K]] for recs in perturbed]
    return math.fsum(continuity_from_selections(sel, sel_p)) / len(sel)


def continuity_details(
    queries: Sequence[Tile],
    support,
    checkpoint: ModelCheckpoint,
    K: int,
    perturb_seed: int,
    manifest: DatasetManifest,
    perturbation: AugmentationSpec | None = None,
    support_vectors: dict | None = None,
) -> tuple[float, list[dict]]:
    """Continuity plus a per-query breakdown naming the perturbation used.

    Each query gets one operator drawn uniformly from the five augmentation
    operators, seeded by ``derive_seed(perturb_seed, "perturb", query_id)``;
    pass ``perturbation`` to force a specific one for every query.
    """
    if not queries:
        raise ValidationError("continuity of an empty query list is undefined")
    items = support_items(support, manifest)
    if not 1 <= K <= len(items):
        raise ParameterError(f"explanation size K must be in [1, {len(items)}], got {K}")
    vecs = support_vectors or {}
    triples = [(sid, cls, vecs[sid] if sid in vecs else embed(manifest.get(sid), checkpoint)) for sid, cls in items]
    per_sample = []
    for q in queries:
        spec = perturbation or random_perturbation(derive_seed(perturb_seed, "perturb", q.tile_id))
        q2 = augment(q, spec, new_id=q.tile_id)
        recs = score_embeddings(q.tile_id, embed(q, checkpoint), triples)
        recs_p = score_embeddings(q.tile_id, embed(q2, checkpoint), triples)
        s = [r.support_id for r in _rank(recs)[:K]]
        sp = [r.support_id for r in _rank(recs_p)[:K]]
        (value,) = continuity_from_selections([s], [sp])
        per_sample.append({"query": q.tile_id, "op": spec.op, "original": s, "perturbed": sp, "continuity": value})
    total = math.fsum(p["continuity"] for p in per_sample) / len(per_sample)
    return total, per_sample


def continuity(
    queries: Sequence[Tile],
    support,
    checkpoint: ModelCheckpoint,
    K: int,
    perturb_seed: int,
    manifest: DatasetManifest,
    perturbation: AugmentationSpec | None = None,
) -> float:
    return continuity_details(queries, support, checkpoint, K, perturb_seed, manifest, perturbation)[0]


# ---------------------------------------------------------------------------
# contrastivity


def _common_k(explanations: Sequence[ExplanationRecord]) -> int:
    if not explanations:
        raise ValidationError("empty explanation list")
    ks = {e.k for e in explanations}
    if len(ks) != 1:
        raise ValidationError(f"explanations mix different sizes K: {sorted(ks)}")
    return ks.pop()


def selection_probabilities(explanations: Sequence[ExplanationRecord]) -> dict[str, float]:
    """Share of all N*K selections taken by each support id."""
    k = _common_k(explanations)
    counts = Counter(sid for e in explanations for sid in e.support_ids)
    total = len(explanations) * k
    return {sid: c / total for sid, c in counts.items()}


def contrastivity_per_sample(explanations: Sequence[ExplanationRecord]) -> list[float] | None:
    """Normalized per-query entropy terms, or ``None`` when K = 1."""
    k = _common_k(explanations)
    if k == 1:
        return None
    p = selection_probabilities(explanations)
    norm = math.log2(k)
    return [-math.fsum(p[s] * math.log2(p[s]) for s in e.support_ids) / norm for e in explanations]


def contrastivity(explanations: Sequence[ExplanationRecord]) -> float | None:
    terms = contrastivity_per_sample(explanations)
    if terms is None:
        return None
    return math.fsum(terms) / len(terms)


def pool_selection_entropy(explanations: Sequence[ExplanationRecord]) -> float:
    """Entropy in bits of the selection-frequency distribution (diagnostic)."""
    p = selection_probabilities(explanations)
    return -math.fsum(v * math.log2(v) for v in p.values())


# ---------------------------------------------------------------------------


def compute_metrics(
    explanations: Sequence[ExplanationRecord], continuity_per_sample: Sequence[float] | None = None
) -> XaiMetricsReport:
    """Bundle correctness, contrastivity and (if supplied) continuity."""
    k = _common_k(explanations)
    cor = correctness_per_sample(explanations)
    cst = contrastivity_per_sample(explanations)
    if continuity_per_sample is not None and len(continuity_per_sample) != len(explanations):
        raise ValidationError("continuity breakdown does not match the explanation list")
    rows = []
    for i, e in enumerate(explanations):
        rows.append(
            {
                "query": e.query_id,
                "pred": e.predicted_class,
                "true": e.true_class,
                "selected": e.support_ids,
                "correctness": cor[i],
                "continuity": None if continuity_per_sample is None else continuity_per_sample[i],
                "contrastivity": None if cst is None else cst[i],
            }
        )
    n = len(explanations)
    return XaiMetricsReport(
        c_cor=math.fsum(cor) / n,
        c_cty=None if continuity_per_sample is None else math.fsum(continuity_per_sample) / n,
        c_cst=None if cst is None else math.fsum(cst) / n,
        k=k,
        n_samples=n,
        per_sample=rows,
        pool_selection_entropy_bits=pool_selection_entropy(explanations),
    )


def save_explanations(explanations: Sequence[ExplanationRecord], path) -> None:
    with open(path, "w") as fh:
        for e in explanations:
            fh.write(json.dumps(e.to_json()) + "\n")


def load_explanations(path) -> list[ExplanationRecord]:
    with open(path) as fh:
        return [ExplanationRecord.from_json(json.loads(line)) for line in fh if line.strip()]
