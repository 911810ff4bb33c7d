import json

import numpy as np
import pytest

from canopy_fewshot.cli import main
from canopy_fewshot.config import RunConfig, load_config, merge
from canopy_fewshot.dataset import DatasetManifest, Tile, save_manifest
from canopy_fewshot.errors import ParameterError
from canopy_fewshot.seeding import derive_seed


def raw_dataset(tmp_path, base_counts, fewshot_counts=(), size=40):
    rng = np.random.default_rng(0)
    tiles, roles = [], {}
    for role, counts in (("base_train", base_counts), ("fewshot", fewshot_counts)):
        for ci, n in enumerate(counts):
            for j in range(n):
                tid = f"{role[0]}{ci}_{j}"
                tiles.append(Tile(tid, rng.integers(0, 256, (size, size, 3), dtype=np.uint8), f"{role[0]}{ci}", 6.0))
                roles[tid] = role
    root = tmp_path / "raw"
    save_manifest(DatasetManifest(tiles, roles), root / "manifest.json")
    return root


def run(*args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------------------
# config


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "train": {"epochs": 7, "batch_size": 16}}))
    preset = {"train": {"epochs": 2, "learning_rate": 0.5}}
    cfg = load_config(path, ["train.batch_size=8"], seed=None, presets=[preset])
    assert cfg.seed == 5
    assert cfg.train.epochs == 7  # file beats preset
    assert cfg.train.learning_rate == 0.5  # preset beats default
    assert cfg.train.batch_size == 8  # flag beats file
    assert load_config(path, seed=9).seed == 9


def test_config_rejects_unknown_keys():
    with pytest.raises(ParameterError):
        merge(RunConfig(), {"train": {"epoch": 3}})
    with pytest.raises(ParameterError):
        merge(RunConfig(), {"trainer": {}})
    with pytest.raises(ParameterError):
        load_config(None, ["train.epochs"])


def test_override_coercion():
    cfg = load_config(None, ["fewshot.ks=[1,3]", "pairing.n_per_side=none", "train.freeze_backbone=true"])
    assert cfg.fewshot.ks == [1, 3] and cfg.pairing.n_per_side is None and cfg.train.freeze_backbone is True


def test_sub_seeds_derive_from_global_seed():
    cfg = RunConfig(seed=11)
    assert cfg.sub_seed("pairs") == derive_seed(11, "pairs")
    assert cfg.sub_seed("pairs") != cfg.sub_seed("train")


def test_merge_does_not_mutate():
    base = RunConfig()
    merge(base, {"train": {"epochs": 1}})
    assert base.train.epochs == 20


# ---------------------------------------------------------------------------
# verbs


def test_prepare_refuse_and_force(tmp_path, tile_dir, capsys):
    out = tmp_path / "out"
    args = ["prepare", "--out", out, "--set", f"data.root={tile_dir}"]
    assert run(*args) == 0
    doc = json.loads((out / "prepared" / "manifest.json").read_text())
    assert len(doc["tiles"]) == 5
    assert json.loads((out / "prepared" / "actions.json").read_text())
    stage = json.loads((out / "prepared" / "stage.json").read_text())
    assert stage["stage"] == "prepared" and len(stage["fingerprint"]) == 16
    assert run(*args) == 3
    assert "--force" in capsys.readouterr().err
    assert run(*args, "--force") == 0
    assert not list(out.glob(".prepared.tmp-*")) and not (out / ".lock").exists()


def test_prepare_bad_image_path(tmp_path, tile_dir, capsys):
    doc = json.loads((tile_dir / "manifest.json").read_text())
    doc["tiles"][2]["path"] = "img/missing.png"
    (tile_dir / "manifest.json").write_text(json.dumps(doc))
    assert run("prepare", "--out", tmp_path / "out", "--set", f"data.root={tile_dir}") == 2
    assert "missing.png" in capsys.readouterr().err
    assert not (tmp_path / "out" / "prepared").exists()


def test_missing_upstream(tmp_path, capsys):
    assert run("pairs", "--out", tmp_path) == 2
    assert "prepared" in capsys.readouterr().err


def test_locked_output(tmp_path, tile_dir):
    (tmp_path / ".lock").write_text("123")
    assert run("prepare", "--out", tmp_path, "--set", f"data.root={tile_dir}") == 3


def test_bad_config_value_is_validation_error(tmp_path):
    assert run("prepare", "--out", tmp_path, "--set", "train.epochs=abc") == 2


def test_pairs_reports_paper_counts(tmp_path, capsys):
    root = raw_dataset(tmp_path, [13, 29, 26, 14, 17], size=12)
    out = tmp_path / "out"
    assert run("prepare", "--out", out, "--set", f"data.root={root}") == 0
    assert run("pairs", "--out", out) == 0
    header = json.loads((out / "pairs" / "pairs.header.json").read_text())
    assert header["enumerated"] == {"similar": 20475, "dissimilar": 82810}
    assert header["counts"] == {"similar": 10000, "dissimilar": 10000}
    assert sum(1 for _ in (out / "pairs" / "pairs.jsonl").open()) == 20000


def test_full_chain(tmp_path):
    root = raw_dataset(tmp_path, [3, 3], [3, 3, 3])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 3,
        "data": {"root": str(root)},
        "pairing": {"variants": 1, "n_per_side": 4},
        "tower": {"embedding_dim": 8},
        "train": {"epochs": 1, "batch_size": 4},
        "refine": {"epochs": 1, "n_per_side": 4, "variants": 1},
        "fewshot": {"ks": [1, 2], "k": 1, "n_folds": 2},
    }))
    out = tmp_path / "out"
    for verb in ("prepare", "pairs", "train", "refine", "classify", "explain", "sweep"):
        assert run(verb, "--config", cfg, "--out", out) == 0, verb
    lineage = json.loads((out / "refined" / "model.json").read_text())["lineage"]
    assert [e["stage"] for e in lineage] == ["base", "refine"]
    preds = (out / "classify" / "predictions.jsonl").read_text().splitlines()
    assert len(preds) == 6
    metrics = json.loads((out / "explain" / "metrics.json").read_text())
    assert metrics["k"] == 1 and metrics["c_cst"] is None and metrics["n"] == 6
    assert (out / "explain" / "report" / "index.html").is_file()
    assert {p.name for p in (out / "sweep").glob("sweep_k*.json")} == {"sweep_k1.json", "sweep_k2.json"}
    table = json.loads((out / "sweep" / "table.json").read_text())
    assert {(r["k"], r["arm"]) for r in table} == {(1, "zero_shot"), (1, "refined"), (2, "zero_shot"), (2, "refined")}
    assert "f1" in (out / "sweep" / "table.tsv").read_text().splitlines()[0]


def test_synthetic_quick_flagged(tmp_path, capsys):
    out = tmp_path / "out"
    assert run("synthetic", "--quick", "--out", out, "--set", "fewshot.ks=[1,3]") == 0
    report = json.loads((out / "synthetic" / "acceptance.json").read_text())
    assert report["acceptance_grade"] is False
    assert {c["name"] for c in report["checks"]} >= {"base_heldout_accuracy", "refinement_gain", "f1_monotone_in_k"}
    assert report["pairs"]["enumerated"] == {"similar": 20475, "dissimilar": 82810}
    text = capsys.readouterr().out
    assert "NOT acceptance-grade" in text
    assert (out / "synthetic" / "explanations" / "index.html").is_file()
    assert (out / "synthetic" / "sweep_k3.json").is_file()
