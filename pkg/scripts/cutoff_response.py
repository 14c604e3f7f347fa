"""Compare the closed-form moving-average cut-off with the measured -3 dB point.

    python3 scripts/cutoff_response.py --fs 500 --windows 250 500 1000
"""

import argparse

import numpy as np

from ecgra.dsp import moving_average_cutoff


def measured_cutoff(fs: float, n: int) -> float:
    """Frequency where |H| of an n-point average first drops to 1/sqrt(2), by bisection."""
    def gain(f):
        w = 2 * np.pi * f / fs
        return abs(np.sin(n * w / 2) / (n * np.sin(w / 2))) if f > 0 else 1.0
    lo, hi = 0.0, fs / n  # first null
    for _ in range(100):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if gain(mid) > 2 ** -0.5 else (lo, mid)
    return lo


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--fs", type=float, default=500.0)
    ap.add_argument("--windows", type=int, nargs="+", default=[250, 500])
    args = ap.parse_args()
    print(f"{'N':>6} {'formula Hz':>11} {'measured Hz':>12} {'rel diff':>9}")
    for n in args.windows:
        f, m = moving_average_cutoff(args.fs, n), measured_cutoff(args.fs, n)
        print(f"{n:6d} {f:11.4f} {m:12.4f} {abs(f - m) / m:9.2e}")


if __name__ == "__main__":
    main()
