"""Ensemble prediction: every pool member sees the recording through its own pipeline."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .metrics import PredictionSet
from .store import Dataset, EcgRecording, Sample
from .training import PipelineConfig, TrainedPool, fixed_window, preprocess_record


def _member_probs(pool: TrainedPool, recs: list[EcgRecording], configs, batch_size: int) -> np.ndarray:
    """(members, N, classes) sigmoid outputs."""
    configs = configs or pool.configs
    cache: dict = {}
    out = []
    for entry in pool.entries:
        cfg: PipelineConfig = configs[entry.pipeline_id]
        target = entry.model.cfg.input_length
        key = (cfg.preprocessing_key(), target)
        if key not in cache:
            cache[key] = np.stack([fixed_window(preprocess_record(r, cfg), target) for r in recs]).astype(np.float32)
        probs, _ = entry.model.predict_proba(cache[key], batch_size)
        out.append(probs)
    return np.stack(out)


def _mean(stack: np.ndarray) -> np.ndarray:
    # sorting along the member axis makes the float sum independent of pool order
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def ensemble_predict(pool: TrainedPool, rec: EcgRecording, configs=None) -> np.ndarray:
    """Unweighted mean of all members' probabilities for one recording."""
    if len(pool) == 0:
        raise DataError("cannot predict with an empty model pool")
    return _mean(_member_probs(pool, [rec], configs, 1))[0]


def ensemble_predict_dataset(pool: TrainedPool, ds: Dataset | list, configs=None, tau: float = 0.5,
                             batch_size: int = 32) -> PredictionSet:
    if len(pool) == 0:
        raise DataError("cannot predict with an empty model pool")
    recs = [s.rec if isinstance(s, Sample) else s for s in ds]
    if not recs:
        return PredictionSet([], np.zeros((0, 9)), tau)
    probs = _mean(_member_probs(pool, recs, configs, batch_size))
    return PredictionSet([r.id for r in recs], probs, tau)


def member_predictions(pool: TrainedPool, ds: Dataset, configs=None, tau: float = 0.5,
                       batch_size: int = 32) -> dict[tuple[int, int], PredictionSet]:
    """Per-member prediction sets, keyed by (pipeline, fold)."""
    recs = [s.rec for s in ds]
    stack = _member_probs(pool, recs, configs, batch_size)
    return {(e.pipeline_id, e.fold): PredictionSet([r.id for r in recs], p, tau)
            for e, p in zip(pool.entries, stack)}
