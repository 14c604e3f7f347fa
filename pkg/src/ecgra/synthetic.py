"""Small synthetic 12-lead corpus with three easily separable waveform classes.

Class 0 carries a 1 Hz pulse train, class 1 a 2.5 Hz sine, class 2 a 6 Hz
sine, all well below the finest wavelet band at 50 Hz sampling. A recording
with several labels carries the sum of their components, plus slow baseline
wander, white noise and per-lead gains.
"""

from __future__ import annotations

import numpy as np

from .store import Dataset, EcgRecording, Sample, labels_from_indices

# 60 recordings: single labels plus every pairwise overlap, deliberately unbalanced
DEFAULT_GROUPS = {(0,): 20, (1,): 12, (2,): 10, (0, 1): 8, (1, 2): 6, (0, 2): 4}
DEFAULT_SECONDS = (9, 10, 10, 10, 12, 15, 20, 30, 40)


def _component(cls: int, t: np.ndarray, rng) -> np.ndarray:
    if cls == 0:
        phase = rng.uniform(0, 1)
        frac = (t + phase) % 1.0
        return 2.0 * np.exp(-0.5 * ((frac - 0.5) / 0.04) ** 2)
    freq = {1: 2.5, 2: 6.0}[cls]
    return np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def synth_recording(rec_id: str, classes, seconds: float, fs: float, rng, noise: float = 0.05) -> EcgRecording:
    n = int(round(seconds * fs))
    t = np.arange(n) / fs
    base = sum(_component(c, t, rng) for c in classes)
    gains = rng.uniform(0.5, 1.5, size=(12, 1))
    wander = 0.3 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
    leads = gains * base[None, :] + wander[None, :] + noise * rng.standard_normal((12, n))
    return EcgRecording(rec_id, fs, leads)


def make_synthetic(groups: dict | None = None, fs: float = 50.0, seed: int = 0, prefix: str = "syn",
                   seconds=DEFAULT_SECONDS, noise: float = 0.05) -> Dataset:
    groups = DEFAULT_GROUPS if groups is None else groups
    rng = np.random.default_rng(seed)
    label_sets = [tuple(g) for g, n in groups.items() for _ in range(n)]
    order = rng.permutation(len(label_sets))
    samples = []
    for i, idx in enumerate(order):
        classes = label_sets[idx]
        secs = float(rng.choice(seconds))
        rec = synth_recording(f"{prefix}{i:04d}", classes, secs, fs, rng, noise)
        samples.append(Sample(rec, labels_from_indices(classes)))
    return Dataset(samples)
