"""Command-line entry point: ``canopy-fewshot <verb> [options]``.

Every stage writes into its own directory under ``--out``:

    prepared/  pairs/  base/  refined/  classify/  explain/  sweep/  synthetic/

Each stage directory is built in a temporary sibling and renamed into place,
carries a ``stage.json`` sidecar with the fingerprint of its configuration and
upstream inputs, and is never overwritten without ``--force``.

Exit codes: 0 success, 2 validation error, 3 refused overwrite or locked
output, 4 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .classification import classify, evaluate, load_predictions, save_predictions, score_embeddings
from .config import RunConfig, load_config
from .dataset import ingest_tiles, save_manifest
from .errors import CanopyError, ValidationError
from .explanation import compute_metrics, continuity_details, save_explanations, select_explanation
from .fewshot import Fold, SupportSet, merged_table, support_refinement_pairs
from .pairs import load_pairs, save_pairs
from .report import render_report
from .seeding import fingerprint
from .siamese import embed, refine

log = logging.getLogger("canopy_fewshot")

EXIT_OK, EXIT_VALIDATION, EXIT_REFUSED, EXIT_INTERNAL = 0, 2, 3, 4
STAGE_FILE = "stage.json"


class RefusedError(CanopyError):
    """Output exists (no ``--force``) or another command holds the lock."""


# ---------------------------------------------------------------------------
# artifact plumbing


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _read_stage(directory: Path, expected: str) -> dict:
    sidecar = directory / STAGE_FILE
    if not sidecar.is_file():
        raise ValidationError(f"missing upstream artifact: {directory} (run `{expected}` first)")
    return json.loads(sidecar.read_text())


@contextlib.contextmanager
def _lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RefusedError(f"{out} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def _stage(out: Path, name: str, force: bool, fp: str, inputs: dict, cfg: RunConfig):
    """Yield a temp directory that becomes ``out/name`` on success."""
    final = out / name
    if final.exists() and not force:
        raise RefusedError(f"{final} already exists; pass --force to overwrite")
    tmp = Path(tempfile.mkdtemp(prefix=f".{name}.tmp-", dir=out))
    handler = logging.FileHandler(tmp / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    try:
        yield tmp
        _write_json(tmp / STAGE_FILE, {"stage": name, "fingerprint": fp, "inputs": inputs, "config": cfg.to_dict()})
        handler.close()
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    finally:
        log.removeHandler(handler)
        handler.close()
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# verbs


def cmd_prepare(cfg: RunConfig, out: Path, force: bool) -> dict:
    if cfg.data.root is None:
        raise ValidationError("data.root is not set (use --config or --set data.root=DIR)")
    root = Path(cfg.data.root)
    raw_path = root / cfg.data.manifest
    raw = ingest_tiles(root, cfg.data.manifest)
    fp = fingerprint(_file_digest(raw_path), cfg.fingerprint("data"))
    with _stage(out, "prepared", force, fp, {"raw_manifest": str(raw_path)}, cfg) as tmp:
        prepared, actions = pipeline.prepare(raw, cfg)
        save_manifest(prepared, tmp / "manifest.json")
        _write_json(tmp / "actions.json", actions)
        log.info("prepared %d tiles (%d normalization actions)", len(prepared), len(actions))
    return {"tiles": len(prepared), "actions": len(actions)}


def _load_prepared(out: Path):
    meta = _read_stage(out / "prepared", "prepare")
    return ingest_tiles(out / "prepared", "manifest.json"), meta


def cmd_pairs(cfg: RunConfig, out: Path, force: bool) -> dict:
    prepared, up = _load_prepared(out)
    fp = fingerprint(up["fingerprint"], cfg.fingerprint("pairing"))
    with _stage(out, "pairs", force, fp, {"prepared": up["fingerprint"]}, cfg) as tmp:
        candidates = pipeline.base_candidates(prepared, cfg)
        pairs = pipeline.base_pairs(candidates, cfg)
        save_manifest(candidates, tmp / "candidates" / "manifest.json")
        save_pairs(pairs, tmp / "pairs.jsonl")
        log.info("pairs: enumerated %s, sampled %s", pairs.enumerated, pairs.counts)
    return pairs.header


def cmd_train(cfg: RunConfig, out: Path, force: bool) -> dict:
    up = _read_stage(out / "pairs", "pairs")
    pairs = load_pairs(out / "pairs" / "pairs.jsonl")
    candidates = ingest_tiles(out / "pairs" / "candidates", "manifest.json")
    fp = fingerprint(up["fingerprint"], cfg.fingerprint("tower", "train"))
    with _stage(out, "base", force, fp, {"pairs": up["fingerprint"]}, cfg) as tmp:
        ck = pipeline.train(pairs, candidates, cfg)
        save_checkpoint(ck, tmp)
        losses = ck.lineage[-1]["losses"]
        log.info("trained base model; loss %.4f -> %.4f", losses[0], losses[-1])
    return {"losses": losses}


def _fold(cfg: RunConfig, prepared):
    plan = pipeline.fold_plan(prepared, cfg, cfg.fewshot.k)
    if not 0 <= cfg.fewshot.fold < len(plan.folds):
        raise ValidationError(f"fewshot.fold={cfg.fewshot.fold} outside 0..{len(plan.folds) - 1}")
    return plan.folds[cfg.fewshot.fold]


def _fold_json(fold: Fold) -> dict:
    return {"support": fold.support.to_json(), "test": list(fold.test_ids)}


def _fold_from_json(doc: dict) -> Fold:
    return Fold(SupportSet(doc["support"]["k"], doc["support"]["members"]), tuple(doc["test"]))


def cmd_refine(cfg: RunConfig, out: Path, force: bool) -> dict:
    prepared, up_p = _load_prepared(out)
    up_b = _read_stage(out / "base", "train")
    base = load_checkpoint(out / "base")
    fold = _fold(cfg, prepared)
    fp = fingerprint(up_b["fingerprint"], up_p["fingerprint"], cfg.fingerprint("refine", "fewshot"))
    with _stage(out, "refined", force, fp, {"base": up_b["fingerprint"], "prepared": up_p["fingerprint"]}, cfg) as tmp:
        pairs, expanded = support_refinement_pairs(
            fold.support, prepared, cfg.sub_seed("refine-aug"), cfg.refine.variants, cfg.refine.n_per_side
        )
        ck = refine(base, pairs, expanded, pipeline.refinement_config(cfg))
        save_checkpoint(ck, tmp)
        _write_json(tmp / "fold.json", _fold_json(fold))
    return {"support": fold.support.to_json(), "pairs": pairs.counts}


def _model_for_eval(cfg: RunConfig, out: Path):
    name = {"base": "base", "refined": "refined"}.get(cfg.classify.checkpoint)
    if name is None:
        raise ValidationError(f"classify.checkpoint must be 'base' or 'refined', got {cfg.classify.checkpoint!r}")
    meta = _read_stage(out / name, "train" if name == "base" else "refine")
    return load_checkpoint(out / name), meta


def _score_fold(ck, fold: Fold, prepared):
    sup = [(sid, cls, embed(prepared.get(sid), ck)) for cls, ids in fold.support.members.items() for sid in ids]
    return sup, {t: score_embeddings(t, embed(prepared.get(t), ck), sup) for t in fold.test_ids}


def cmd_classify(cfg: RunConfig, out: Path, force: bool) -> dict:
    prepared, up_p = _load_prepared(out)
    ck, up_m = _model_for_eval(cfg, out)
    fold = _fold(cfg, prepared)
    fp = fingerprint(up_m["fingerprint"], up_p["fingerprint"], cfg.fingerprint("classify", "fewshot"))
    with _stage(out, "classify", force, fp, {"model": up_m["fingerprint"], "prepared": up_p["fingerprint"]}, cfg) as tmp:
        _, records = _score_fold(ck, fold, prepared)
        preds = [
            classify(recs, cfg.classify.method, cfg.classify.knn_k or fold.support.shots_k,
                     true_class=prepared.get(q).class_label)
            for q, recs in records.items()
        ]
        save_predictions(preds, tmp / "predictions.jsonl")
        _write_json(tmp / "fold.json", _fold_json(fold))
        report = evaluate(preds) if all(p.true_class is not None for p in preds) else None
        _write_json(tmp / "report.json", report.to_json() if report else None)
    return report.headline() if report else {"n": len(preds)}


def cmd_explain(cfg: RunConfig, out: Path, force: bool) -> dict:
    prepared, up_p = _load_prepared(out)
    up_c = _read_stage(out / "classify", "classify")
    ck, up_m = _model_for_eval(cfg, out)
    fold = _fold_from_json(json.loads((out / "classify" / "fold.json").read_text()))
    preds = {p.query_id: p for p in load_predictions(out / "classify" / "predictions.jsonl")}
    K = cfg.explain.k or fold.support.shots_k
    fp = fingerprint(up_c["fingerprint"], up_m["fingerprint"], cfg.fingerprint("explain"))
    with _stage(out, "explain", force, fp, {"classify": up_c["fingerprint"], "model": up_m["fingerprint"]}, cfg) as tmp:
        sup, records = _score_fold(ck, fold, prepared)
        expls = [select_explanation(records[q], K, preds[q]) for q in fold.test_ids]
        _, rows = continuity_details(
            [prepared.get(q) for q in fold.test_ids], fold.support, ck, K, cfg.sub_seed("perturb"), prepared,
            support_vectors={sid: v for sid, _, v in sup},
        )
        metrics = compute_metrics(expls, [r["continuity"] for r in rows])
        save_explanations(expls, tmp / "explanations.jsonl")
        _write_json(tmp / "metrics.json", metrics.to_json())
        _write_json(tmp / "continuity.json", rows)
        render_report(expls, metrics, prepared, tmp / "report")
    return {k: v for k, v in metrics.to_json().items() if k != "per_sample"}


def _write_sweep(results, directory: Path) -> list[dict]:
    for r in results:
        _write_json(directory / f"sweep_k{r.k}.json", r.to_json())
    table = merged_table(results)
    _write_json(directory / "table.json", table)
    cols = ["k", "arm", "precision", "recall", "f1", "accuracy"]
    lines = ["\t".join(cols)]
    for row in table:
        lines.append("\t".join([str(row["k"]), row["arm"]] + [f"{row[c]:.3f}±{row[c + '_std']:.3f}" for c in cols[2:]]))
    (directory / "table.tsv").write_text("\n".join(lines) + "\n")
    return table


def cmd_sweep(cfg: RunConfig, out: Path, force: bool) -> dict:
    prepared, up_p = _load_prepared(out)
    up_b = _read_stage(out / "base", "train")
    base = load_checkpoint(out / "base")
    fp = fingerprint(up_b["fingerprint"], up_p["fingerprint"], cfg.fingerprint("refine", "fewshot", "classify", "explain"))
    with _stage(out, "sweep", force, fp, {"base": up_b["fingerprint"], "prepared": up_p["fingerprint"]}, cfg) as tmp:
        table = _write_sweep(pipeline.sweep(base, prepared, cfg), tmp)
    return {"rows": table}


def _acceptance_text(report: dict) -> str:
    lines = [f"synthetic acceptance run (seed {report['seed']})"]
    if not report["acceptance_grade"]:
        lines.append("QUICK MODE: reduced budgets, results are NOT acceptance-grade")
    for c in report["checks"]:
        lines.append(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']} (need {c['threshold']})")
    lines.append(f"total time {report['timing']['total_s']:.0f} s")
    return "\n".join(lines) + "\n"


def cmd_synthetic(cfg: RunConfig, out: Path, force: bool, quick: bool = False) -> dict:
    fp = fingerprint(cfg.fingerprint(), quick)
    with _stage(out, "synthetic", force, fp, {}, cfg) as tmp:
        report = pipeline.run_synthetic(cfg, quick=quick)
        ck, manifest, results = report["_checkpoint"], report["_manifest"], report["_results"]
        public = pipeline.public_report(report)
        _write_json(tmp / "acceptance.json", public)
        (tmp / "acceptance.txt").write_text(_acceptance_text(public))
        save_checkpoint(ck, tmp / "base")
        _write_sweep(results, tmp)
        top = results[-1]
        arm = top.arms["refined"]
        expls = arm.explanations[0]
        metrics = compute_metrics(expls)
        render_report(expls, metrics, manifest, tmp / "explanations", title=f"Refined {top.k}-shot, fold 0")
        sys.stdout.write(_acceptance_text(public))
    return public["headline"]


VERBS = {
    "prepare": cmd_prepare,
    "pairs": cmd_pairs,
    "train": cmd_train,
    "refine": cmd_refine,
    "classify": cmd_classify,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
    "synthetic": cmd_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canopy-fewshot", description="Few-shot twin-tower similarity toolkit.")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--out", default="run", help="output directory holding all stage directories")
    p.add_argument("--force", action="store_true", help="overwrite an existing stage directory")
    p.add_argument("--quick", action="store_true", help="tiny budgets for smoke runs (non-acceptance-grade)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; may repeat")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    presets = []
    if args.verb == "synthetic":
        presets.append(pipeline.SYNTHETIC_PRESET)
    if args.quick:
        presets.append(pipeline.QUICK_PRESET)
    return load_config(args.config, args.set, args.seed, presets)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    log.setLevel(logging.INFO)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        with _lock(out):
            fn = VERBS[args.verb]
            result = fn(cfg, out, args.force, args.quick) if args.verb == "synthetic" else fn(cfg, out, args.force)
        if args.verb != "synthetic":
            sys.stdout.write(json.dumps(result, indent=1, default=str) + "\n")
        return EXIT_OK
    except RefusedError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
