"""Train all four pipelines on the synthetic corpus and compare the ensemble with its members.

    python3 scripts/ensemble_experiment.py --run runs/ensemble --folds 5 --train-folds 0 1 2
"""

import argparse
import logging

import numpy as np

from ecgra.ensemble import ensemble_predict_dataset, member_predictions
from ecgra.metrics import evaluate, write_report
from ecgra.model import ModelConfig
from ecgra.store import split_folds
from ecgra.synthetic import make_synthetic
from ecgra.training import PipelineConfig, train_all


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", default="runs/ensemble")
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--train-folds", type=int, nargs="+", default=None)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--retrain-epochs", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = make_synthetic(seed=args.seed)
    test = make_synthetic(seed=args.seed + 1, prefix="tst")
    folds = split_folds(ds, args.folds, seed=args.seed)
    mc = ModelConfig(input_length=1500, kernel_size=16, base_channels=8, channel_growth=8,
                     num_residual_modules=3, attention_hidden=16, seed=args.seed)
    kw = dict(lr=3e-3, batch_size=16, seed=args.seed)
    configs = [PipelineConfig.default(p, epochs=args.retrain_epochs if p == 3 else args.epochs, **kw)
               for p in (1, 2, 3, 4)]
    pool = train_all(ds, configs, mc, folds, run_dir=args.run, only_folds=args.train_folds, jobs=args.jobs)

    y = test.label_matrix()
    singles = []
    for (pid, fold), preds in sorted(member_predictions(pool, test).items()):
        singles.append(evaluate(preds.labels, y).overall_over(range(3)))
        print(f"pipeline {pid} fold {fold}: test F1 {singles[-1]:.3f}")
    report = evaluate(ensemble_predict_dataset(pool, test).labels, y)
    print(f"ensemble of {len(pool)}: test F1 {report.overall_over(range(3)):.3f} "
          f"(median member {np.median(singles):.3f})")
    _, txt = write_report(report, f"{args.run}/test_report.csv")
    print(f"report written to {txt}")


if __name__ == "__main__":
    main()
