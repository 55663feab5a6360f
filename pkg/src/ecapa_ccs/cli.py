"""Command line entry point: ``ecapa-ccs <command> ...``.

Exit codes: 0 success, 1 data error, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, DataError
from .features import extract_file, mel_filterbank
from .model import build, layer_table, param_count
from .training import (
    check_classes,
    evaluate,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train_fold,
    tta_predict,
)

log = logging.getLogger("ecapa_ccs")


def _write_json(path: Path, doc) -> None:
    D.atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    audio_dir = Path(args.audio_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = D.read_jsonl(args.manifest, ("id", "label"))
    fb = mel_filterbank()
    done, failures = [], []
    for lineno, rec in records:
        eid = str(rec["id"])
        wav = audio_dir / rec.get("audio_path", f"{eid}.wav")
        try:
            mel = extract_file(wav, fb)
            name = f"{eid}.melb"
            D.write_features(out_dir / name, mel)
        except (DataError, OSError) as exc:
            failures.append((eid, str(wav), str(exc)))
            print(f"error: {wav}: {exc}", file=sys.stderr)
            continue
        done.append(D.ManifestEntry(eid, name, str(rec["label"])))
    D.write_manifest(out_dir / "manifest.jsonl", done)
    print(f"extracted {len(done)} of {len(records)} files, {len(failures)} failed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# folds


def _label_map(cfg: RunConfig | None, labels=None) -> D.LabelMap:
    if cfg is None:
        return D.LabelMap(labels=labels)
    return D.LabelMap(list(cfg.data.label_remaps), set(cfg.data.label_exclusions), labels)


def _load_entries(manifest: Path, label_map: D.LabelMap, feature_dir: Path | None = None):
    entries = D.load_manifest(manifest)
    if feature_dir is not None:
        entries = [D.ManifestEntry(e.id, str(feature_dir / Path(e.feature_path).name), e.label)
                   for e in entries]
    kept, report = D.apply_label_map(entries, label_map)
    for label, n in report.items():
        log.info("excluded %d entries labelled %s", n, label)
    return kept


def print_fold_table(plan: D.FoldPlan, entries) -> None:
    labels = sorted({e.label for e in entries})
    table = D.fold_table(plan, entries)
    width = max(6, *(len(lab) for lab in labels))
    print("fold  " + " ".join(f"{lab:>{width}}" for lab in labels) + "   total")
    for f, row in enumerate(table):
        print(f"{f:>4}  " + " ".join(f"{n:>{width}}" for n in row) + f"   {sum(row):>5}")


def cmd_folds(args) -> int:
    cfg = load_config(args.config) if args.config else None
    entries = _load_entries(Path(args.manifest), _label_map(cfg))
    plan = D.stratified_kfold(entries, args.k, args.seed)
    D.atomic_write(Path(args.out), plan.to_json().encode())
    print_fold_table(plan, entries)
    return 0


# ---------------------------------------------------------------------------
# train


def _prepare_run(cfg: RunConfig):
    manifest = cfg.data_path("manifest")
    if manifest is None:
        raise ConfigError("data.manifest is required")
    label_map = _label_map(cfg)
    entries = _load_entries(manifest, label_map, cfg.data_path("feature_dir"))
    if not entries:
        raise DataError("no entries left after label mapping")
    model_cfg = cfg.model_config(len(label_map.labels))
    plan_path = cfg.data_path("fold_plan")
    if plan_path is not None:
        plan = D.FoldPlan.from_json(plan_path.read_text())
    else:
        plan = D.stratified_kfold(entries, cfg.data.folds, cfg.train.seed)
    return entries, label_map.labels, model_cfg, plan


def run_fold(cfg: RunConfig, fold: int, out_dir: Path) -> dict:
    entries, labels, model_cfg, plan = _prepare_run(cfg)
    store = D.FeatureStore()
    for e in entries:  # fail before any compute if a feature file is missing
        store.get(e)
    result = train_fold(model_cfg, cfg.train, entries, labels, plan, fold, store=store)
    resolved = cfg.resolved(len(labels))
    seed = cfg.train.seed + fold
    save_checkpoint(out_dir / f"fold{fold}.ckpt", result.model, labels,
                    {"config": resolved, "fold": fold, "seed": seed})
    report = {"fold": fold, "seed": seed, "config": resolved, "losses": result.losses,
              **result.metrics.to_dict()}
    _write_json(out_dir / f"fold{fold}.metrics.json", report)
    print(f"fold {fold}: accuracy {result.metrics.accuracy:.4f} "
          f"({int(np.trace(result.metrics.confusion))}/{int(result.metrics.confusion.sum())})")
    return report


def _run_fold_job(job):
    cfg, fold, out_dir = job
    return run_fold(cfg, fold, out_dir)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    _, labels, _, plan = _prepare_run(cfg)  # validates everything up front
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.all_folds:
        if not 0 <= args.fold < plan.k:
            raise ConfigError(f"fold {args.fold} out of range for k={plan.k}")
        run_fold(cfg, args.fold, out_dir)
        return 0
    jobs = [(cfg, f, out_dir) for f in range(plan.k)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_run_fold_job, jobs))
    else:
        reports = [_run_fold_job(j) for j in jobs]
    accs = [r["accuracy"] for r in reports]
    confusion = np.sum([r["confusion"] for r in reports], axis=0).astype(int).tolist()
    summary = {"config": cfg.resolved(len(labels)), "labels": labels,
               "per_fold_accuracy": accs, "mean_accuracy": float(np.mean(accs)),
               "confusion": confusion}
    _write_json(out_dir / "report.json", summary)
    print(f"mean accuracy over {len(accs)} folds: {100 * summary['mean_accuracy']:.1f}%")
    return 0


# ---------------------------------------------------------------------------
# eval / predict


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.document.get("config", {"model": {}}))
    label_map = _label_map(cfg)
    entries = _load_entries(Path(args.manifest), label_map)
    check_classes(ckpt.labels, label_map.labels)
    if args.fold is not None:
        if args.fold_plan:
            plan = D.FoldPlan.from_json(Path(args.fold_plan).read_text())
        elif cfg.data.fold_plan:
            # the embedded config keeps paths as written, relative to its own file
            raise ConfigError("the training run used a fold plan file; pass it with --fold-plan")
        else:
            plan = D.stratified_kfold(entries, cfg.data.folds, cfg.train.seed)
        _, entries = plan.split(entries, args.fold)
    store = D.FeatureStore()
    samples = [(store.get(e), e.class_id) for e in entries]
    t = cfg.train
    metrics = evaluate(ckpt.model, samples, ckpt.labels, tta=args.tta, n_crops=t.tta_crops,
                       frames=t.crop_frames, input_norm=t.input_norm)
    report = {"checkpoint": str(args.checkpoint), "fold": args.fold, "tta": args.tta,
              **metrics.to_dict()}
    if args.out:
        _write_json(Path(args.out), report)
    print(f"accuracy {metrics.accuracy:.4f} over {int(metrics.confusion.sum())} entries"
          + (" (tta)" if args.tta else ""))
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.document.get("config", {"model": {}}))
    t = cfg.train
    if args.wav:
        mel = extract_file(args.wav).values
    else:
        mel = D.read_features(args.features).values
    if args.tta:
        probs = tta_predict(ckpt.model, mel, t.tta_crops, t.crop_frames, t.input_norm)
    else:
        probs = predict_proba(ckpt.model, mel, t.crop_frames, t.input_norm)
    order = np.argsort(-probs, kind="stable")[: args.top_k]
    for i in order:
        print(f"{ckpt.labels[i]}\t{probs[i]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# inspect


def _model_from_source(path: str):
    if path.endswith(".ckpt"):
        return load_checkpoint(path).model
    cfg = load_config(path)
    # configs usually leave n_classes to the label map; assume 10 for display
    n = None if cfg.model.get("n_classes") is not None else 10
    return build(cfg.model_config(n), 0)


def print_layer_table(model) -> int:
    rows = layer_table(model)
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    w2 = max(len(r[2]) for r in rows)
    print(f"{'Layer':<{w0}}  {'Block structure':<{w1}}  {'Output':<{w2}}  {'Params':>10}")
    for name, struct_, out, n in rows:
        print(f"{name:<{w0}}  {struct_:<{w1}}  {out:<{w2}}  {n:>10,}")
    total = param_count(model)
    print(f"total parameters: {total:,}")
    return total


def cmd_inspect(args) -> int:
    sources = ([args.checkpoint] if args.checkpoint else []) + (args.config or [])
    if not sources:
        raise ConfigError("give --checkpoint or --config")
    totals = []
    for src in sources:
        print(f"== {src}")
        totals.append(print_layer_table(_model_from_source(src)))
    if len(totals) == 2:
        print(f"parameter ratio (second / first): {totals[1] / totals[0]:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecapa-ccs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="WAV files -> MELB feature archives")
    s.add_argument("--audio-dir", required=True)
    s.add_argument("--manifest", required=True,
                   help="JSONL with id, label and optional audio_path (default <id>.wav)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("folds", help="stratified k-fold plan")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config whose label remaps/exclusions apply")
    s.set_defaults(func=cmd_folds)

    s = sub.add_parser("train", help="train one fold or all folds")
    s.add_argument("--config", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--fold", type=int)
    g.add_argument("--all-folds", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, help="override train.seed")
    s.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fold", type=int)
    s.add_argument("--fold-plan")
    s.add_argument("--tta", action="store_true")
    s.add_argument("--out", help="write the metrics report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="layer table and parameter counts")
    s.add_argument("--checkpoint")
    s.add_argument("--config", action="append", help="run config (repeat for a ratio)")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("predict", help="top-k genres for one clip")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--wav")
    g.add_argument("--features")
    s.add_argument("--top-k", type=int, default=5)
    s.add_argument("--tta", action="store_true")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
