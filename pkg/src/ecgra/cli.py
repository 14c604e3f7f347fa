"""``ecgra`` command line: ingest, preprocess, augment, train, predict, evaluate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import CLASSES, __version__
from .config import load_run_config, write_resolved
from .dsp import moving_average_cutoff, remove_baseline, wavelet_denoise, zscore_normalize
from .errors import DataError, EcgraError, NumericalError, UsageError
from .lengths import build_plan, length_histogram
from .store import Dataset, Sample, load_dataset, save_dataset, split_folds

log = logging.getLogger("ecgra")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dataset(args, need_labels: bool = False) -> Dataset:
    if need_labels and not args.labels:
        raise DataError("this command needs ground-truth labels; pass --labels")
    return load_dataset(args.manifest, args.labels or None)


def cmd_ingest(args) -> int:
    ds = _dataset(args)
    hist = length_histogram(ds, args.max_seconds)
    summary = {
        "records": len(ds),
        "ids": ds.ids,
        "class_counts": dict(zip(CLASSES, ds.class_counts().tolist())),
        "length_histogram": {str(k): v for k, v in hist.nonzero().items()},
    }
    print(f"{len(ds)} records")
    shown = ds.ids[:20]
    print("ids: " + ", ".join(shown) + (" ..." if len(ds) > len(shown) else ""))
    print("class counts:")
    for name, n in summary["class_counts"].items():
        print(f"  {name:6s} {n}")
    print("length histogram (whole seconds, last bucket is >= %d s):" % args.max_seconds)
    for b, n in hist.nonzero().items():
        print(f"  {b:3d} s {n}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(summary, indent=1) + "\n")
    return 0


def _steps_from_args(args):
    """(baseline window or None, denoise, zscore) for the preprocess command."""
    if args.pipeline is not None:
        from .training import PipelineConfig
        cfg = PipelineConfig.default(args.pipeline)
        return (cfg.baseline_window if cfg.baseline_removal else None, cfg.denoise,
                cfg.normalization == "zscore", cfg.wavelet_levels)
    return args.baseline_window, args.denoise, args.zscore, args.levels


def cmd_preprocess(args) -> int:
    ds = _dataset(args)
    window, do_denoise, do_zscore, levels = _steps_from_args(args)
    out = []
    for s in ds:
        rec = s.rec
        if window:
            rec = remove_baseline(rec, window)
        if do_denoise:
            rec = rec.replace(leads=wavelet_denoise(rec.leads, levels))
        if do_zscore:
            rec = zscore_normalize(rec)
        out.append(Sample(rec, s.labels))
    save_dataset(Dataset(out), args.out, with_labels=bool(args.labels))
    steps = []
    if window:
        fs = ds.records[0].rec.fs if len(ds) else float("nan")
        steps.append(f"baseline removal N={window} (f_co = {moving_average_cutoff(fs, window):.3f} Hz at {fs:g} Hz)")
    if do_denoise:
        steps.append(f"db4 {levels}-level soft-threshold denoising")
    if do_zscore:
        steps.append("z-score per lead")
    print(f"preprocessed {len(ds)} records: " + ("; ".join(steps) or "no steps"))
    return 0


def cmd_augment(args) -> int:
    ds = _dataset(args, need_labels=True)
    plan = build_plan(ds, args.mode, seed=args.seed, max_seconds=args.max_seconds)
    plan.write_csv(args.out)
    counts = np.zeros(len(CLASSES), int)
    lookup = ds.by_id()
    for e in plan.entries:
        counts += e.copies * lookup[e.id].labels.astype(int)
    print(f"plan: {len(plan.entries)} entries, {plan.total_copies} windows "
          f"({plan.extra_copies(ds)} beyond the originals)")
    print("class counts after augmentation: " + ", ".join(f"{c}={n}" for c, n in zip(CLASSES, counts)))
    if args.materialize:
        from .lengths import apply_plan
        save_dataset(apply_plan(ds, plan, args.target_length, args.seed), args.materialize)
    return 0


def _run_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for flag, key in (("seed", "run.seed"), ("jobs", "run.jobs"), ("out", "run.output_dir"),
                      ("pipelines", "run.pipelines"), ("manifest", "run.manifest"), ("labels", "run.labels")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = str(val)
    return load_run_config(args.config, overrides)


def cmd_train(args) -> int:
    from .training import fold_dir, train_all

    rc = _run_config(args)
    run_dir = Path(rc.output_dir)
    write_resolved(rc, run_dir)
    if not rc.manifest:
        raise UsageError("no dataset: set [run] manifest in the config or pass --manifest")
    ds = load_dataset(rc.manifest, rc.labels or None)
    aux = load_dataset(rc.aux_manifest, rc.aux_labels or None) if rc.aux_manifest else None
    folds = split_folds(ds, rc.folds, rc.seed)
    mc = rc.model_config()
    fold_ids = [int(f) for f in args.folds.split(",")] if args.folds else list(range(rc.folds))
    present = all((fold_dir(run_dir, p, f) / "model.ckpt").exists() for p in rc.pipelines for f in fold_ids)
    pool = train_all(ds, rc.pipeline_configs(), mc, folds, aux=aux, run_dir=run_dir,
                     only_folds=fold_ids, jobs=rc.effective_jobs)
    if present:
        print("all checkpoints present; nothing retrained")
    print(f"pool: {len(pool)} checkpoints under {run_dir}")
    return 0


def _pool_and_data(args, need_labels):
    from .training import load_pool
    pool = load_pool(args.pool)
    ds = _dataset(args, need_labels)
    return pool, ds


def cmd_predict(args) -> int:
    from .ensemble import ensemble_predict_dataset

    pool, ds = _pool_and_data(args, need_labels=False)
    preds = ensemble_predict_dataset(pool, ds, tau=args.tau)
    out = Path(args.out) if args.out else Path(args.pool) / "predictions.csv"
    preds.write_csv(out)
    print(f"wrote {len(preds.ids)} predictions from {len(pool)} models to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .ensemble import ensemble_predict_dataset
    from .metrics import PredictionSet, evaluate, write_report

    if not args.labels:
        raise DataError("evaluate needs ground-truth labels; pass --labels")
    if args.predictions:
        ds = _dataset(args, need_labels=True)
        preds = PredictionSet.read_csv(args.predictions, tau=args.tau)
    else:
        if not args.pool:
            raise UsageError("evaluate needs --pool or --predictions")
        pool, ds = _pool_and_data(args, need_labels=True)
        preds = ensemble_predict_dataset(pool, ds, tau=args.tau)
    truths = {s.id: s.labels for s in ds}
    report = evaluate(preds.as_dict(), truths)
    base = Path(args.out) if args.out else Path(args.pool or Path(args.predictions).parent) / "report.csv"
    csv_path, txt_path = write_report(report, base)
    print(txt_path.read_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_suite

    corrupt = {}
    for item in args.inject_fault or []:
        name, _, scale = item.partition("=")
        if name not in CASES:
            raise UsageError(f"unknown primitive {name!r}; choose from {', '.join(CASES)}")
        corrupt[name] = float(scale) if scale else 0.1
    names = args.only.split(",") if args.only else None
    for n in names or []:
        if n not in CASES:
            raise UsageError(f"unknown primitive {n!r}")
    worst = run_suite(seeds=args.seeds, eps=args.eps, corrupt=corrupt, names=names)
    failed = [n for n, e in worst.items() if not e < args.tol]
    if args.json:
        print(json.dumps({"tolerance": args.tol, "seeds": args.seeds,
                          "results": {n: {"max_rel_error": e, "pass": e < args.tol} for n, e in worst.items()},
                          "ok": not failed}, indent=1))
    else:
        for n, e in worst.items():
            print(f"{'PASS' if e < args.tol else 'FAIL'}  {n:20s} {e:.3e}")
    if failed:
        if not args.json:
            print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return NumericalError.exit_code
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecgra", description="12-lead ECG multi-label classification toolkit")
    p.add_argument("--version", action="version", version=f"ecgra {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp):
        sp.add_argument("--manifest", required=True, help="manifest.csv (id,path,fs,length)")
        sp.add_argument("--labels", default=None, help="labels.csv (id,labels)")

    s = sub.add_parser("ingest", parents=[common], help="validate a dataset and summarize it")
    data_args(s)
    s.add_argument("--out", help="also write the summary as JSON")
    s.add_argument("--max-seconds", type=int, default=30)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", parents=[common], help="baseline removal / denoising / z-scoring")
    data_args(s)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--pipeline", type=int, choices=[1, 2, 3, 4])
    s.add_argument("--baseline-window", type=int, default=None)
    s.add_argument("--denoise", action="store_true")
    s.add_argument("--zscore", action="store_true")
    s.add_argument("--levels", type=int, default=5)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", parents=[common], help="build a redistribution/balancing plan")
    data_args(s)
    s.add_argument("--out", required=True, help="plan CSV path")
    s.add_argument("--mode", default="both", choices=["identity", "redistribute", "balance", "both"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-seconds", type=int, default=30)
    s.add_argument("--materialize", help="also write the augmented, length-unified dataset here")
    s.add_argument("--target-length", type=int, default=15000)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", parents=[common], help="train every (pipeline, fold) model; resumable")
    s.add_argument("--config", help="sectioned key = value config file")
    s.add_argument("--manifest")
    s.add_argument("--labels")
    s.add_argument("--out", help="run directory (default runs)")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, help="parallel fold workers (default: all cores)")
    s.add_argument("--pipelines", help="comma list, e.g. 1,2,3")
    s.add_argument("--folds", help="comma list of fold indices to train")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="ensemble probabilities -> predictions.csv")
    s.add_argument("--pool", required=True, help="run directory holding pool.json")
    data_args(s)
    s.add_argument("--out")
    s.add_argument("--tau", type=float, default=0.5)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="per-class and overall F1 -> report.csv")
    s.add_argument("--pool", help="run directory holding pool.json")
    s.add_argument("--predictions", help="score an existing predictions.csv instead")
    data_args(s)
    s.add_argument("--out")
    s.add_argument("--tau", type=float, default=0.5)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer's backward pass")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--only", help="comma list of primitives")
    s.add_argument("--json", action="store_true")
    s.add_argument("--inject-fault", action="append", metavar="PRIMITIVE[=SCALE]",
                   help="scale that primitive's analytic gradient by 1+SCALE (default 0.1)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EcgraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
