import math

import numpy as np
import pytest

from canopy_fewshot.dataset import DatasetManifest
from canopy_fewshot.errors import ParameterError, ValidationError
from canopy_fewshot.fewshot import (
    ArmResult,
    Fold,
    SupportSet,
    build_fold_plan,
    evaluate_fold,
    merged_table,
    run_sweep,
    support_refinement_pairs,
)
from canopy_fewshot.siamese import TowerSpec, TrainingConfig, init_checkpoint

from conftest import make_manifest

TABLE1_FEWSHOT = [6, 14, 30, 16, 10, 6]


def test_table1_fewshot_plan():
    m = make_manifest(TABLE1_FEWSHOT, role="fewshot", size=1)
    plan = build_fold_plan(m, k=3, n_folds=4, seed=0)
    assert len(plan.folds) == 4
    for fold in plan.folds:
        assert all(len(v) == 3 for v in fold.support.members.values())
        assert len(fold.test_ids) == sum(TABLE1_FEWSHOT) - 6 * 3
        assert not set(fold.support.tile_ids) & set(fold.test_ids)
        assert set(fold.support.tile_ids) | set(fold.test_ids) == {t.tile_id for t in m.tiles}
    # support selections differ between folds for every class
    for c in plan.folds[0].support.members:
        sels = {frozenset(f.support.members[c]) for f in plan.folds}
        assert len(sels) == 4


def test_minimal_alternation():
    m = make_manifest([2], role="fewshot", size=1)
    plan = build_fold_plan(m, k=1, n_folds=2, seed=0)
    (a,), (b,) = plan.folds[0].support.members["c0"], plan.folds[1].support.members["c0"]
    assert a != b
    assert plan.folds[0].test_ids == (b,) and plan.folds[1].test_ids == (a,)


def test_plan_deterministic():
    m = make_manifest([5, 7], role="fewshot", size=1)
    assert build_fold_plan(m, 2, 4, seed=9) == build_fold_plan(m, 2, 4, seed=9)


@pytest.mark.parametrize("k", [0, 4])
def test_k_range(k):
    with pytest.raises(ParameterError):
        build_fold_plan(make_manifest([9], role="fewshot", size=1), k)


def test_too_small_class_named():
    m = make_manifest([5, 3], role="fewshot", size=1)
    with pytest.raises(ValidationError, match="c1"):
        build_fold_plan(m, 3)


def test_overlapping_fold_rejected():
    with pytest.raises(ValidationError):
        Fold(SupportSet(1, {"a": ("x",)}), ("x", "y"))


def test_support_set_exact_k():
    with pytest.raises(ValidationError):
        SupportSet(2, {"a": ("x",)})


# ---------------------------------------------------------------------------
# refinement pairs


def test_six_class_three_shot_pair_counts():
    m = make_manifest([4] * 6, role="fewshot")
    support = SupportSet(3, {c: tuple(t.tile_id for t in ts[:3]) for c, ts in m.by_class("fewshot").items()})
    pairs, expanded = support_refinement_pairs(support, m, aug_seed=1)
    assert pairs.enumerated == {"similar": 6 * math.comb(21, 2), "dissimilar": 15 * 21 * 21}
    assert pairs.enumerated == {"similar": 1260, "dissimilar": 6615}
    assert pairs.counts == {"similar": 1260, "dissimilar": 1260}
    assert len(expanded) == 6 * 21


def test_two_class_one_shot_pair_counts():
    m = make_manifest([2, 2], role="fewshot")
    support = SupportSet(1, {"c0": ("c0_000",), "c1": ("c1_000",)})
    pairs, _ = support_refinement_pairs(support, m, aug_seed=1)
    assert pairs.enumerated == {"similar": 42, "dissimilar": 49}
    assert pairs.counts == {"similar": 42, "dissimilar": 42}


def test_refinement_pairs_deterministic():
    m = make_manifest([2, 2], role="fewshot")
    support = SupportSet(1, {"c0": ("c0_000",), "c1": ("c1_000",)})
    a, ea = support_refinement_pairs(support, m, aug_seed=4)
    b, eb = support_refinement_pairs(support, m, aug_seed=4)
    assert a.pairs == b.pairs
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(ea.tiles, eb.tiles))


def test_single_class_support_rejected():
    m = make_manifest([2], role="fewshot")
    with pytest.raises(ValidationError, match="two support classes"):
        support_refinement_pairs(SupportSet(1, {"c0": ("c0_000",)}), m, aug_seed=0)


# ---------------------------------------------------------------------------
# aggregation and sweeps


def test_single_fold_aggregate():
    arm = ArmResult(folds=[{"precision": 0.5, "recall": 0.4, "f1": 0.3, "accuracy": 0.6, "c_cor": 0.2,
                            "c_cty": 1.0, "c_cst": None}])
    mean, std = arm.aggregate()
    assert mean["f1"] == 0.3 and std["f1"] == 0.0
    assert mean["c_cst"] is None


def test_aggregate_matches_independent_mean():
    rng = np.random.default_rng(0)
    folds = [{k: float(rng.random()) for k in ("precision", "recall", "f1", "accuracy", "c_cor", "c_cty", "c_cst")}
             for _ in range(4)]
    mean, std = ArmResult(folds=folds).aggregate()
    for key in folds[0]:
        vals = [f[key] for f in folds]
        assert mean[key] == pytest.approx(sum(vals) / 4, abs=1e-12)
        assert std[key] == pytest.approx(math.sqrt(sum((v - sum(vals) / 4) ** 2 for v in vals) / 4), abs=1e-12)


@pytest.fixture(scope="module")
def small_sweep():
    m = make_manifest([3, 3], role="fewshot")
    plan = build_fold_plan(m, k=1, n_folds=2, seed=3)
    base = init_checkpoint(TowerSpec(embedding_dim=8), seed=0)
    cfg = TrainingConfig(epochs=1, batch_size=16, learning_rate=1e-3, seed=1)
    return m, plan, base, cfg, run_sweep(base, plan, cfg, m, refine_pairs_per_side=8)


def test_sweep_structure(small_sweep):
    m, plan, base, cfg, res = small_sweep
    assert set(res.arms) == {"zero_shot", "refined"}
    for arm in res.arms.values():
        assert len(arm.folds) == 2
        assert [len(p) for p in arm.predictions] == [len(f.test_ids) for f in plan.folds]
    # both arms classify exactly the same queries per fold
    for pz, pr in zip(res.arms["zero_shot"].predictions, res.arms["refined"].predictions):
        assert [p.query_id for p in pz] == [p.query_id for p in pr]
    j = res.to_json()
    assert j["k"] == 1 and set(j["arms"]["refined"]["mean"]) >= {"precision", "recall", "f1", "accuracy"}


def test_zero_shot_arm_is_the_base_model(small_sweep):
    m, plan, base, _, res = small_sweep
    metrics, preds, _ = evaluate_fold(base, plan.folds[0], m, perturb_seed=0)
    assert [p.predicted_class for p in preds] == [p.predicted_class for p in res.arms["zero_shot"].predictions[0]]


def test_merged_table_rows(small_sweep):
    *_, res = small_sweep
    rows = merged_table([res])
    assert [(r["k"], r["arm"]) for r in rows] == [(1, "zero_shot"), (1, "refined")]
    assert {"precision", "recall", "f1", "accuracy", "f1_std"} <= set(rows[0])


def test_sweep_deterministic(small_sweep):
    m, plan, base, cfg, res = small_sweep
    again = run_sweep(base, plan, cfg, m, refine_pairs_per_side=8)
    assert again.to_json() == res.to_json()
