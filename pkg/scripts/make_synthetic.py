"""Write the synthetic three-class corpus (and a held-out test split) to disk.

    python3 scripts/make_synthetic.py data/synth --fs 50 --seed 0
"""

import argparse
from pathlib import Path

from ecgra.store import save_dataset
from ecgra.synthetic import DEFAULT_GROUPS, make_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--fs", type=float, default=50.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply every label-group size")
    args = ap.parse_args()
    groups = {g: max(1, round(n * args.scale)) for g, n in DEFAULT_GROUPS.items()}
    out = Path(args.out)
    train = make_synthetic(groups, fs=args.fs, seed=args.seed)
    test = make_synthetic(groups, fs=args.fs, seed=args.seed + 1, prefix="tst")
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"{len(train)} training and {len(test)} test recordings under {out}")


if __name__ == "__main__":
    main()
