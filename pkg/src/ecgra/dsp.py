"""Signal conditioning: baseline-wander removal, db4 wavelet denoising, z-scoring.

All transforms operate along the last axis, so a (12, L) lead matrix is
processed lead by lead without an explicit loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .store import LEADS, EcgRecording

# Daubechies-4 scaling (reconstruction low-pass) filter, 8 taps.
DB4_REC_LO = np.array([
    0.2303778133088965, 0.7148465705529157, 0.6308807679298589, -0.027983769416859854,
    -0.18703481171909309, 0.030841381835560764, 0.0328830116668852, -0.010597401785069032,
])
DB4_DEC_LO = DB4_REC_LO[::-1].copy()
# quadrature mirror: g[n] = (-1)^(n+1) h[F-1-n]
DB4_DEC_HI = DB4_REC_LO * np.array([(-1) ** (n + 1) for n in range(8)])
FILTER_LEN = 8

MAD_SCALE = 0.6745
CUTOFF_FACTOR = 0.443


def moving_average_cutoff(fs: float, window: int) -> float:
    """-3 dB cut-off of an N-point moving average: 0.443 * fs / N."""
    if not fs > 0 or not window >= 1:
        raise ValueError(f"fs and window must be positive (fs={fs}, window={window})")
    return CUTOFF_FACTOR * fs / window


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric extension: x[-1] = x[0], x[n] = x[n-1]
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


def estimate_baseline(signal: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with mirror-extended edges.

    The window for sample i spans ``[i - N//2, i + N - 1 - N//2]``, so an even
    window leans one sample to the left.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] == 0:
        raise DataError("cannot estimate the baseline of an empty signal")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window == 1:
        return x.copy()
    n = x.shape[-1]
    left = window // 2
    right = window - 1 - left
    idx = _reflect_index(np.arange(-left, n + right), n)
    ext = x[..., idx]
    csum = np.cumsum(ext, axis=-1)
    csum = np.concatenate([np.zeros(csum.shape[:-1] + (1,)), csum], axis=-1)
    return (csum[..., window:] - csum[..., :-window]) / window


def remove_baseline(rec: EcgRecording, window: int) -> EcgRecording:
    return rec.replace(leads=rec.leads - estimate_baseline(rec.leads, window))


@dataclass
class WaveletCoeffs:
    approximation: np.ndarray
    details: list[np.ndarray]  # details[0] is level 1 (finest)
    original_length: int
    mode: str = "symmetric"
    level_lengths: list[int] = field(default_factory=list)  # input length at each level

    @property
    def levels(self) -> int:
        return len(self.details)


def _analysis_symmetric(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1]
    out = (n + FILTER_LEN - 1) // 2
    pad = FILTER_LEN - 1
    ext = x[..., _reflect_index(np.arange(-pad, n + pad), n)]
    lo = np.zeros(x.shape[:-1] + (out,))
    hi = np.zeros_like(lo)
    # c[k] = sum_j f[j] * x[2k + 1 - j]
    for j in range(FILTER_LEN):
        start = 1 - j + pad
        seg = ext[..., start:start + 2 * out:2]
        lo += DB4_DEC_LO[j] * seg
        hi += DB4_DEC_HI[j] * seg
    return lo, hi


def _synthesis_symmetric(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    out = lo.shape[-1]
    pad = FILTER_LEN - 1
    y = np.zeros(lo.shape[:-1] + (2 * out + 2 * pad,))
    for j in range(FILTER_LEN):
        start = 1 - j + pad
        y[..., start:start + 2 * out:2] += DB4_DEC_LO[j] * lo + DB4_DEC_HI[j] * hi
    return y[..., pad:pad + n]


def _periodic_positions(half: int, j: int) -> np.ndarray:
    return np.mod(2 * np.arange(half) + 1 - j + FILTER_LEN // 2 - 1, 2 * half)


def _analysis_periodic(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[-1] % 2:
        x = np.concatenate([x, x[..., -1:]], axis=-1)
    half = x.shape[-1] // 2
    lo = np.zeros(x.shape[:-1] + (half,))
    hi = np.zeros_like(lo)
    for j in range(FILTER_LEN):
        seg = x[..., _periodic_positions(half, j)]
        lo += DB4_DEC_LO[j] * seg
        hi += DB4_DEC_HI[j] * seg
    return lo, hi


def _synthesis_periodic(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    half = lo.shape[-1]
    y = np.zeros(lo.shape[:-1] + (2 * half,))
    for j in range(FILTER_LEN):
        pos = _periodic_positions(half, j)
        # positions are distinct for a fixed tap, so fancy-index += is safe
        y[..., pos] += DB4_DEC_LO[j] * lo + DB4_DEC_HI[j] * hi
    return y[..., :n]


_MODES = {
    "symmetric": (_analysis_symmetric, _synthesis_symmetric),
    "periodization": (_analysis_periodic, _synthesis_periodic),
}


def dwt_db4(signal: np.ndarray, levels: int = 5, mode: str = "symmetric") -> WaveletCoeffs:
    """Multilevel db4 analysis along the last axis.

    ``periodization`` keeps ceil(n/2) coefficients per level and is
    orthonormal; ``symmetric`` mirror-extends the edges and keeps
    floor((n + 7)/2) coefficients, which is what exact inversion needs with a
    non-symmetric filter.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    if n < 2 ** levels:
        raise DataError(f"signal of length {n} is too short for {levels} levels (need >= {2 ** levels})")
    analysis, _ = _MODES[mode]
    details, lengths = [], []
    approx = x
    for _ in range(levels):
        lengths.append(approx.shape[-1])
        approx, d = analysis(approx)
        details.append(d)
    return WaveletCoeffs(approx, details, n, mode, lengths)


def idwt_db4(coeffs: WaveletCoeffs) -> np.ndarray:
    _, synthesis = _MODES[coeffs.mode]
    lengths = coeffs.level_lengths or _default_lengths(coeffs)
    if len(lengths) != coeffs.levels or lengths[0] != coeffs.original_length:
        raise DataError("level lengths disagree with the coefficient structure")
    approx = np.asarray(coeffs.approximation, dtype=np.float64)
    for level in reversed(range(coeffs.levels)):
        d = np.asarray(coeffs.details[level], dtype=np.float64)
        expected = _coeff_count(lengths[level], coeffs.mode)
        if d.shape != approx.shape or d.shape[-1] != expected:
            raise DataError(
                f"level {level + 1}: expected {expected} coefficients, "
                f"got approximation {approx.shape[-1]} / detail {d.shape[-1]}")
        approx = synthesis(approx, d, lengths[level])
    return approx


def _coeff_count(n: int, mode: str) -> int:
    return (n + FILTER_LEN - 1) // 2 if mode == "symmetric" else (n + 1) // 2


def _default_lengths(coeffs: WaveletCoeffs) -> list[int]:
    lengths, n = [], coeffs.original_length
    for _ in range(coeffs.levels):
        lengths.append(n)
        n = _coeff_count(n, coeffs.mode)
    return lengths


def soft_threshold(values: np.ndarray, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def noise_sigma(finest_details: np.ndarray) -> np.ndarray:
    """Robust noise level from the finest detail band: median(|d1|) / 0.6745."""
    return np.median(np.abs(finest_details), axis=-1) / MAD_SCALE


@dataclass(frozen=True)
class DenoiseParams:
    baseline_window: int = 500
    wavelet_levels: int = 5
    threshold_rule: str = "universal"
    normalization: str = "none"  # or "zscore"
    mode: str = "symmetric"

    def __post_init__(self):
        if self.baseline_window < 1 or self.wavelet_levels < 1:
            raise ValueError("baseline_window and wavelet_levels must be >= 1")
        if self.threshold_rule != "universal":
            raise ValueError(f"unsupported threshold rule {self.threshold_rule!r}")
        if self.normalization not in ("none", "zscore"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def wavelet_denoise(signal: np.ndarray, levels: int = 5, mode: str = "symmetric") -> np.ndarray:
    """Universal-threshold soft shrinkage of every detail band, per row."""
    x = np.asarray(signal, dtype=np.float64)
    coeffs = dwt_db4(x, levels, mode)
    sigma = noise_sigma(coeffs.details[0])
    t = sigma * math.sqrt(2.0 * math.log(x.shape[-1]))
    t = np.asarray(t)[..., None]
    coeffs.details = [np.sign(d) * np.maximum(np.abs(d) - t, 0.0) for d in coeffs.details]
    return idwt_db4(coeffs)


def denoise(rec: EcgRecording, params: DenoiseParams | None = None) -> EcgRecording:
    params = params or DenoiseParams()
    out = wavelet_denoise(rec.leads, params.wavelet_levels, params.mode)
    rec = rec.replace(leads=out)
    if params.normalization == "zscore":
        rec = zscore_normalize(rec)
    return rec


def zscore_normalize(rec: EcgRecording) -> EcgRecording:
    leads = np.asarray(rec.leads, dtype=np.float64)
    mean = leads.mean(axis=-1, keepdims=True)
    std = leads.std(axis=-1, keepdims=True)
    flat = np.flatnonzero(std[:, 0] < 1e-12)
    if flat.size:
        names = ", ".join(LEADS[i] for i in flat)
        raise DataError(f"{rec.id}: zero-variance lead(s) {names}; cannot z-score")
    return rec.replace(leads=(leads - mean) / std)
