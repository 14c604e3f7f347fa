"""Optimizer, per-fold training, the four pipelines and the model pool."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .dsp import remove_baseline, wavelet_denoise, zscore_normalize
from .errors import CheckpointError, DataError, DependencyError, NumericalError
from .lengths import MAX_SECONDS, build_plan, materialize, pad_random, plan_items, truncate_random
from .metrics import evaluate, threshold_labels
from .model import Model, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .store import Dataset, EcgRecording, FoldAssignment, Sample, base_id

log = logging.getLogger(__name__)

PIPELINES = (1, 2, 3, 4)


@dataclass(frozen=True)
class PipelineConfig:
    pipeline_id: int
    baseline_window: int = 500
    baseline_removal: bool = True
    denoise: bool = True
    normalization: str = "none"
    balancing: str = "balanced"
    aux_dataset: str | None = None
    init_from: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    wavelet_levels: int = 5
    wavelet_mode: str = "symmetric"
    max_seconds: int = MAX_SECONDS

    def __post_init__(self):
        pid = self.pipeline_id
        if pid not in PIPELINES:
            raise ValueError(f"pipeline_id must be one of {PIPELINES}, got {pid}")
        want_n = 250 if pid == 1 else 500
        if self.baseline_window != want_n:
            raise ValueError(f"pipeline {pid} uses baseline window {want_n}, got {self.baseline_window}")
        if pid == 4 and (self.denoise or self.baseline_removal or self.normalization != "zscore"):
            raise ValueError("pipeline 4 is z-score only: no baseline removal, no denoising")
        if pid == 3 and self.init_from is None:
            raise ValueError("pipeline 3 needs init_from (the pipeline whose checkpoints it retrains)")
        if self.normalization not in ("none", "zscore"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.balancing not in ("balanced", "imbalanced"):
            raise ValueError(f"balancing must be 'balanced' or 'imbalanced', got {self.balancing!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    @classmethod
    def default(cls, pipeline_id: int, **overrides) -> "PipelineConfig":
        base = {
            1: dict(baseline_window=250),
            2: dict(),
            3: dict(balancing="imbalanced", init_from=2),
            4: dict(baseline_removal=False, denoise=False, normalization="zscore"),
        }[pipeline_id]
        return cls(pipeline_id=pipeline_id, **{**base, **overrides})

    @property
    def augmentation_mode(self) -> str:
        return "both" if self.balancing == "balanced" else "identity"

    def preprocessing_key(self) -> tuple:
        return (self.baseline_removal, self.baseline_window, self.denoise, self.normalization,
                self.wavelet_levels, self.wavelet_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


def preprocess_record(rec: EcgRecording, cfg: PipelineConfig) -> EcgRecording:
    """Baseline removal, wavelet denoising and z-scoring, as switched by ``cfg``."""
    if cfg.baseline_removal:
        rec = remove_baseline(rec, cfg.baseline_window)
    if cfg.denoise:
        rec = rec.replace(leads=wavelet_denoise(rec.leads, cfg.wavelet_levels, cfg.wavelet_mode))
    if cfg.normalization == "zscore":
        rec = zscore_normalize(rec)
    return rec


def preprocess_dataset(ds: Dataset, cfg: PipelineConfig) -> Dataset:
    return Dataset([Sample(preprocess_record(s.rec, cfg), s.labels) for s in ds], ds.manifest_path)


def fixed_window(rec: EcgRecording, target: int) -> np.ndarray:
    """Evaluation-time unification: the pad/crop offset depends only on the record id."""
    rng = np.random.default_rng(zlib.crc32(rec.id.encode()))
    if rec.length <= target:
        return pad_random(rec.leads, target, rng)
    return truncate_random(rec.leads, target, rng)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected adaptive-moment update, applied in place. Returns (params, state)."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------- one fold

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


@dataclass
class FoldResult:
    model: Model          # best validation checkpoint
    final: Model          # parameters after the last epoch
    trace: list[EpochStats]
    best_epoch: int

    def write_trace(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
            for e in self.trace:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_f1)])


def _init_seed(cfg: ModelConfig, pipeline_id: int, fold: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, pipeline_id, fold]).generate_state(1)[0])


def fresh_model(cfg: ModelConfig, pipeline_id: int = 0, fold: int = 0) -> Model:
    """Model with an initialization drawn per (seed, pipeline, fold)."""
    seeded = dataclasses.replace(cfg, seed=_init_seed(cfg, pipeline_id, fold))
    return Model(cfg, init_parameters(seeded))


def stack_windows(samples, target: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([fixed_window(s.rec, target) for s in samples]).astype(np.float32)
    y = np.stack([s.labels for s in samples]).astype(np.float32)
    return x, y


def evaluate_model(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """(mean BCE, overall F1 at 0.5) of eval-mode predictions."""
    probs, _ = model.predict_proba(x, batch_size)
    loss, _ = L.bce_loss(probs, y)
    return loss, evaluate(threshold_labels(probs), y).overall


def check_disjoint(train_ids, val_ids) -> None:
    seen = {base_id(i) for i in train_ids}
    overlap = seen & {base_id(i) for i in val_ids}
    if overlap:
        raise DataError(f"train/validation leakage on base ids: {', '.join(sorted(overlap)[:5])}")


def train_fold(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig, cfg: PipelineConfig,
               init: Model | None = None, fold: int = 0) -> FoldResult:
    """Train one model; both datasets must already be preprocessed for ``cfg``.

    Training windows are redrawn every epoch from the augmentation plan. The
    returned ``model`` is the epoch with the best validation overall F1, ties
    going to the lower validation loss.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError(f"pipeline {cfg.pipeline_id} fold {fold}: empty training or validation split")
    check_disjoint(train_ds.ids, val_ds.ids)
    target = model_cfg.input_length
    if init is not None:
        if init.cfg != model_cfg:
            raise CheckpointError("initial checkpoint was built with a different model config")
        model = init.copy()
    else:
        model = fresh_model(model_cfg, cfg.pipeline_id, fold)

    plan = build_plan(train_ds, cfg.augmentation_mode, seed=cfg.seed, max_seconds=cfg.max_seconds)
    items = plan_items(plan)
    lookup = train_ds.by_id()
    x_val, y_val = stack_windows(val_ds, target)

    state = AdamState()
    trace: list[EpochStats] = []
    best, best_key, best_epoch = None, None, -1
    key = [cfg.seed, cfg.pipeline_id, fold]
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(key + [epoch])
        order = rng.permutation(len(items))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            samples = [materialize(lookup[plan.entries[e].id], plan.entries[e],
                                   np.random.default_rng(key + [epoch, e, c]), target, n)
                       for e, c, n in batch]
            x = np.stack([s.rec.leads for s in samples]).astype(np.float32)
            y = np.stack([s.labels for s in samples]).astype(np.float32)
            logits, _, cache = model.forward(x, train=True, rng=np.random.default_rng(key + [epoch, 1 << 20, b]),
                                             keep_cache=True)
            if not np.all(np.isfinite(logits)):
                raise NumericalError(f"pipeline {cfg.pipeline_id} fold {fold} epoch {epoch}: non-finite logits")
            loss, dlogits = L.bce_with_logits(logits, y)
            grads = model.backward(dlogits, cache)
            try:
                adam_step(model.params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NumericalError as exc:
                raise NumericalError(f"pipeline {cfg.pipeline_id} fold {fold} epoch {epoch}: {exc}") from None
            total += loss * len(batch)
            seen += len(batch)
        train_loss = total / seen
        if not np.isfinite(train_loss):
            raise NumericalError(f"pipeline {cfg.pipeline_id} fold {fold}: training loss diverged")
        val_loss, val_f1 = evaluate_model(model, x_val, y_val)
        trace.append(EpochStats(epoch, train_loss, val_loss, val_f1))
        log.info("pipeline %d fold %d epoch %d: loss %.4f val_loss %.4f val_f1 %.4f",
                 cfg.pipeline_id, fold, epoch, train_loss, val_loss, val_f1)
        cand = (val_f1, -val_loss)
        if best_key is None or cand > best_key:
            best, best_key, best_epoch = model.copy(), cand, epoch
    return FoldResult(best, model, trace, best_epoch)


# ---------------------------------------------------------------- pipelines and pool

@dataclass
class PoolEntry:
    pipeline_id: int
    fold: int
    model: Model


@dataclass
class TrainedPool:
    entries: list[PoolEntry]
    fold_assignment: FoldAssignment
    configs: dict[int, PipelineConfig] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, pipeline_id: int, fold: int) -> Model:
        for e in self.entries:
            if (e.pipeline_id, e.fold) == (pipeline_id, fold):
                return e.model
        raise KeyError((pipeline_id, fold))

    def keys(self) -> list[tuple[int, int]]:
        return [(e.pipeline_id, e.fold) for e in self.entries]


def fold_dir(run_dir, pipeline_id: int, fold: int) -> Path:
    return Path(run_dir) / str(pipeline_id) / str(fold)


def _try_load(path: Path, model_cfg: ModelConfig) -> Model | None:
    if not path.exists():
        return None
    try:
        return load_checkpoint(path, expect=model_cfg)
    except CheckpointError as exc:
        log.warning("ignoring unusable checkpoint %s: %s", path, exc)
        return None


def _split(ds: Dataset, folds: FoldAssignment, fold: int, aux: Dataset | None):
    train = ds.subset(lambda s: folds.fold_of(s.id) != fold)
    val = ds.subset(lambda s: folds.fold_of(s.id) == fold)
    if aux is not None and len(aux):
        train = Dataset(train.records + aux.records, train.manifest_path)
    return train, val


def _train_job(args):
    train, val, model_cfg, cfg, init, fold, out = args
    result = train_fold(train, val, model_cfg, cfg, init=init, fold=fold)
    if out is not None:
        save_checkpoint(result.model, out / "model.ckpt")
        result.write_trace(out / "loss.csv")
    return result.model


def run_pipeline(cfg: PipelineConfig, ds: Dataset, model_cfg: ModelConfig, folds: FoldAssignment,
                 aux: Dataset | None = None, init_models: dict[int, Model] | None = None,
                 run_dir=None, only_folds=None, jobs: int = 1, preprocessed: Dataset | None = None) -> dict[int, Model]:
    """Train every fold of one pipeline; returns fold -> best checkpoint.

    With ``run_dir`` set, checkpoints land in ``<run_dir>/<pipeline>/<fold>/``
    and folds whose checkpoint already loads cleanly are skipped.
    """
    fold_ids = list(range(folds.k)) if only_folds is None else list(only_folds)
    if cfg.init_from is not None:
        missing = [f for f in fold_ids if not init_models or f not in init_models]
        if missing:
            raise DependencyError(f"pipeline {cfg.pipeline_id} needs pipeline {cfg.init_from} "
                                  f"checkpoints for folds {missing}")
    if aux is not None:
        clash = {base_id(i) for i in aux.ids} & {base_id(i) for i in ds.ids}
        if clash:
            raise DataError(f"auxiliary records reuse dataset ids: {', '.join(sorted(clash)[:5])}")
    done, jobs_args = {}, []
    pre, pre_aux = None, None
    for fold in fold_ids:
        out = fold_dir(run_dir, cfg.pipeline_id, fold) if run_dir is not None else None
        if out is not None:
            model = _try_load(out / "model.ckpt", model_cfg)
            if model is not None:
                log.info("pipeline %d fold %d: checkpoint present, skipping", cfg.pipeline_id, fold)
                done[fold] = model
                continue
        if pre is None:
            pre = preprocessed if preprocessed is not None else preprocess_dataset(ds, cfg)
            pre_aux = preprocess_dataset(aux, cfg) if aux is not None else None
        train, val = _split(pre, folds, fold, pre_aux)
        init = init_models[fold] if cfg.init_from is not None else None
        jobs_args.append((train, val, model_cfg, cfg, init, fold, out))
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_job, jobs_args))
    else:
        results = [_train_job(a) for a in jobs_args]
    for a, model in zip(jobs_args, results):
        done[a[5]] = model
    return {f: done[f] for f in fold_ids}


def _order(configs) -> list[PipelineConfig]:
    # dependents after the pipelines they initialize from
    ordered, pending = [], sorted(configs, key=lambda c: c.pipeline_id)
    while pending:
        have = {c.pipeline_id for c in ordered}
        ready = [c for c in pending if c.init_from is None or c.init_from in have
                 or c.init_from not in {p.pipeline_id for p in pending}]
        if not ready:
            raise DependencyError("circular init_from between pipelines")
        ordered.append(ready[0])
        pending.remove(ready[0])
    return ordered


def save_pool_manifest(run_dir, pool: TrainedPool) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "folds": {"k": pool.fold_assignment.k, "seed": pool.fold_assignment.seed,
                  "assignment": dict(sorted(pool.fold_assignment.folds.items()))},
        "pipelines": {str(k): v.to_dict() for k, v in sorted(pool.configs.items())},
        "members": [[e.pipeline_id, e.fold] for e in pool.entries],
    }
    (run_dir / "pool.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_pool(run_dir) -> TrainedPool:
    run_dir = Path(run_dir)
    path = run_dir / "pool.json"
    if not path.exists():
        raise DataError(f"{run_dir}: no pool.json; run the train command first")
    meta = json.loads(path.read_text())
    f = meta["folds"]
    folds = FoldAssignment({k: int(v) for k, v in f["assignment"].items()}, f["seed"], f["k"])
    configs = {int(k): PipelineConfig.from_dict(v) for k, v in meta["pipelines"].items()}
    entries = []
    for pid, fold in meta["members"]:
        ckpt = fold_dir(run_dir, pid, fold) / "model.ckpt"
        if not ckpt.exists():
            raise DataError(f"{ckpt}: missing pool member")
        entries.append(PoolEntry(pid, fold, load_checkpoint(ckpt)))
    return TrainedPool(entries, folds, configs)


def train_all(ds: Dataset, configs, model_cfg: ModelConfig, folds: FoldAssignment,
              aux: Dataset | None = None, run_dir=None, only_folds=None, jobs: int = 1) -> TrainedPool:
    """Train every requested pipeline on one shared fold assignment.

    A pipeline that initializes from another one takes that pipeline's
    checkpoints from this run, or from ``run_dir`` if it is not requested.
    """
    configs = list(configs)
    by_id = {c.pipeline_id: c for c in configs}
    if len(by_id) != len(configs):
        raise ValueError("duplicate pipeline ids")
    trained: dict[int, dict[int, Model]] = {}
    fold_ids = list(range(folds.k)) if only_folds is None else list(only_folds)
    shared_pre: dict[tuple, Dataset] = {}
    for cfg in _order(configs):
        init = None
        if cfg.init_from is not None:
            init = trained.get(cfg.init_from)
            if init is None and run_dir is not None:
                found = {f: _try_load(fold_dir(run_dir, cfg.init_from, f) / "model.ckpt", model_cfg)
                         for f in fold_ids}
                init = {f: m for f, m in found.items() if m is not None}
            if not init or set(init) != set(fold_ids):
                raise DependencyError(f"pipeline {cfg.pipeline_id} retrains pipeline {cfg.init_from}'s "
                                      f"checkpoints, which are not available; train pipeline {cfg.init_from} first")
        use_aux = aux if cfg.aux_dataset is not None else None
        if cfg.aux_dataset is not None and aux is None:
            raise DataError(f"pipeline {cfg.pipeline_id} names aux dataset {cfg.aux_dataset} but none was loaded")
        pkey = cfg.preprocessing_key()
        if pkey not in shared_pre:
            shared_pre[pkey] = preprocess_dataset(ds, cfg)
        trained[cfg.pipeline_id] = run_pipeline(cfg, ds, model_cfg, folds, aux=use_aux, init_models=init,
                                                run_dir=run_dir, only_folds=fold_ids, jobs=jobs,
                                                preprocessed=shared_pre[pkey])
    entries = [PoolEntry(pid, f, m) for pid in sorted(trained) for f, m in sorted(trained[pid].items())]
    pool = TrainedPool(entries, folds, {c.pipeline_id: c for c in configs})
    if run_dir is not None:
        save_pool_manifest(run_dir, pool)
    return pool
