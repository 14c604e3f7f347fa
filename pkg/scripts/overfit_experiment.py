"""Train one reduced model on the synthetic corpus, then retrain it on imbalanced data.

Prints the per-epoch trace and the train/validation F1 over the three
synthetic classes for both stages.

    python3 scripts/overfit_experiment.py --epochs 30 --retrain-epochs 10
"""

import argparse
import logging

from ecgra.metrics import evaluate
from ecgra.model import ModelConfig, save_checkpoint
from ecgra.store import split_folds
from ecgra.synthetic import make_synthetic
from ecgra.training import PipelineConfig, _split, preprocess_dataset, stack_windows, train_fold


def f1(model, samples, length):
    x, y = stack_windows(samples, length)
    probs, _ = model.predict_proba(x)
    return evaluate((probs >= 0.5).astype(int), y).overall_over(range(3))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--retrain-epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="write the stage-one checkpoint here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = make_synthetic(seed=args.seed)
    folds = split_folds(ds, args.folds, seed=args.seed)
    mc = ModelConfig(input_length=1500, kernel_size=16, base_channels=8, channel_growth=8,
                     num_residual_modules=3, attention_hidden=16, seed=args.seed)
    kw = dict(lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    cfg2 = PipelineConfig.default(2, epochs=args.epochs, **kw)
    train, val = _split(preprocess_dataset(ds, cfg2), folds, args.fold, None)
    print(f"{len(train)} training / {len(val)} validation recordings, {mc.input_length} samples each")

    stage1 = train_fold(train, val, mc, cfg2, fold=args.fold)
    print(f"balanced stage: best epoch {stage1.best_epoch + 1}, train F1 {f1(stage1.model, train, 1500):.3f}, "
          f"val F1 {f1(stage1.model, val, 1500):.3f}")
    if args.save:
        save_checkpoint(stage1.model, args.save)
    if args.retrain_epochs:
        cfg3 = PipelineConfig.default(3, epochs=args.retrain_epochs, **kw)
        stage2 = train_fold(train, val, mc, cfg3, init=stage1.model, fold=args.fold)
        print(f"imbalanced stage: train F1 {f1(stage2.model, train, 1500):.3f}, "
              f"val F1 {f1(stage2.model, val, 1500):.3f}")


if __name__ == "__main__":
    main()
