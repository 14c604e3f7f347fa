"""Headline acceptance criteria, each reported as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end under "acceptance criteria".
"""

import contextlib
import filecmp
import shutil
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from ecgra.cli import main
from ecgra.dsp import DB4_DEC_HI, DB4_REC_LO, dwt_db4, idwt_db4, moving_average_cutoff
from ecgra.ensemble import ensemble_predict_dataset, member_predictions
from ecgra.gradcheck import CASES, run_suite
from ecgra.lengths import apply_plan, build_balancing_plan, build_redistribution_plan, redistribution_fit
from ecgra.metrics import ConfusionCounts, evaluate, overall_f1, precision_recall_f1
from ecgra.model import ModelConfig, build_model, forward, receptive_fields
from ecgra.store import save_dataset, split_folds
from ecgra.synthetic import make_synthetic
from ecgra.training import (PipelineConfig, TrainedPool, _split, preprocess_dataset, stack_windows,
                            train_all, train_fold)

ACTIVE = range(3)  # the synthetic corpus only uses three classes


@contextlib.contextmanager
def criterion(name):
    notes = []
    try:
        yield notes
    except AssertionError as exc:
        msg = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        ACCEPTANCE.append((name, False, "; ".join(notes + [msg])))
        raise
    ACCEPTANCE.append((name, True, "; ".join(notes)))


# ---------------------------------------------------------------- instant checks

def test_cutoff_fidelity():
    with criterion("moving-average cut-off values") as notes:
        lo, hi = moving_average_cutoff(500, 500), moving_average_cutoff(500, 250)
        notes.append(f"N=500 -> {lo!r} Hz, N=250 -> {hi!r} Hz")
        assert lo == 0.443 and hi == 0.886, "cut-off values differ"


def test_gradient_suite():
    with criterion("gradient suite") as notes:
        worst = run_suite(seeds=20)
        notes.append(f"{len(worst)} primitives x 20 seeds, worst {max(worst.values()):.2e}")
        bad = {k: v for k, v in worst.items() if not v < 1e-3}
        assert "residual_module" in worst and "residual_projection" in worst
        assert not bad, f"over 1e-3: {bad}"


def test_wavelet_round_trip():
    with criterion("wavelet round trip") as notes:
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            x = rng.standard_normal(int(rng.integers(64, 4097)))
            worst = max(worst, float(np.abs(idwt_db4(dwt_db4(x, 5)) - x).max()))
        s, e = DB4_REC_LO.sum(), (DB4_REC_LO ** 2).sum()
        notes.append(f"max error {worst:.1e}, |sum h - sqrt2| {abs(s - np.sqrt(2)):.1e}, |sum h^2 - 1| {abs(e - 1):.1e}")
        assert worst < 1e-8
        assert abs(s - np.sqrt(2)) < 1e-12 and abs(e - 1) < 1e-12
        assert abs(DB4_DEC_HI.sum()) < 1e-12


def test_shape_chain():
    with criterion("shape chain") as notes:
        cfg = ModelConfig()
        model = build_model(cfg)
        x = np.random.default_rng(1).standard_normal((2, 12, 15000)).astype(np.float32)
        logits, alpha, cache = model.forward(x, keep_cache=True)
        locals_ = cache[2][0]
        probs, alpha2 = forward(model, x)
        notes.append(f"locals {locals_.shape[1:]}, probs {probs.shape}, attention {alpha.shape}")
        assert locals_.shape == (2, 117, 64)
        assert probs.shape == (2, 9) and np.all((probs > 0) & (probs < 1))
        for a in (alpha, alpha2):
            assert np.abs(a.sum(axis=1) - 1).max() < 1e-6


def _brute(pred, truth):
    f1 = []
    for j in range(truth.shape[1]):
        tp = fp = fn = 0
        for i in range(truth.shape[0]):
            tp += truth[i, j] and pred[i, j]
            fp += (not truth[i, j]) and pred[i, j]
            fn += truth[i, j] and not pred[i, j]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return np.array(f1)


def test_metrics_oracle():
    with criterion("metrics oracle") as notes:
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 21))
            truth = rng.integers(0, 2, (n, 9))
            pred = rng.integers(0, 2, (n, 9))
            rep = evaluate(pred, truth)
            ref = _brute(pred, truth)
            assert np.allclose(rep.f1, ref, atol=1e-12) and abs(rep.overall - ref.mean()) < 1e-12
        for tp, fp, fn in rng.integers(0, 40, (1000, 3)):
            f = precision_recall_f1(ConfusionCounts(*(np.array([v]) for v in (tp, fp, 0, fn))))[2][0]
            den = 2 * tp + fp + fn
            assert abs(f - (2 * tp / den if den else 0.0)) < 1e-12
        mean = overall_f1([0.875, 0.974, 0.901, 0.983, 0.747, 0.971, 0.926, 0.736, 0.757])
        notes.append(f"oracle agreement ok; published per-class F1 mean {mean:.6f}, |mean - 0.875| = {abs(mean - 0.875):.2e}")
        assert abs(mean - 0.875) < 5e-4, "published per-class F1 values average 0.874444, outside 5e-4 of the 0.875 total"


def test_augmentation_invariants():
    with criterion("augmentation invariants") as notes:
        ds = make_synthetic()
        bal = build_balancing_plan(ds)
        lookup = ds.by_id()
        counts = sum(e.copies * lookup[e.id].labels.astype(int) for e in bal.entries)[:3]
        assert counts.max() - counts.min() <= 1, f"balanced counts {counts}"
        fits = redistribution_fit(ds, build_redistribution_plan(ds))
        assert all(f.distance <= f.bound for f in fits)
        out = apply_plan(ds, bal, target=1500, seed=0)
        for s in out:
            src = lookup[s.id.split("#")[0]].rec.leads
            if src.shape[1] <= 1500:
                nz = np.flatnonzero(np.any(s.rec.leads != 0, axis=0))
                p = int(nz[0]) if len(nz) else 0
                assert np.array_equal(s.rec.leads[:, p:p + src.shape[1]], src)
                assert not s.rec.leads[:, :p].any() and not s.rec.leads[:, p + src.shape[1]:].any()
        notes.append(f"balanced counts {counts.tolist()}; redistribution distance/bound "
                     + ", ".join(f"{f.distance:.3f}/{f.bound:.3f}" for f in fits)
                     + f"; {len(out)} unified windows checked")


# ---------------------------------------------------------------- trained models

REDUCED = ModelConfig(input_length=1500, kernel_size=16, base_channels=8, channel_growth=8,
                      num_residual_modules=3, attention_hidden=16)
TRAIN_KW = dict(lr=3e-3, batch_size=16)


@pytest.fixture(scope="module")
def corpus():
    ds = make_synthetic()
    return ds, split_folds(ds, 5, seed=0)


@pytest.fixture(scope="module")
def overfit(corpus):
    ds, folds = corpus
    cfg2 = PipelineConfig.default(2, epochs=30, **TRAIN_KW)
    pre = preprocess_dataset(ds, cfg2)
    train, val = _split(pre, folds, 0, None)
    stage1 = train_fold(train, val, REDUCED, cfg2, fold=0)
    cfg3 = PipelineConfig.default(3, epochs=10, **TRAIN_KW)
    stage2 = train_fold(train, val, REDUCED, cfg3, init=stage1.model, fold=0)
    return train, val, stage1, stage2


def _f1(model, samples):
    x, y = stack_windows(samples, REDUCED.input_length)
    probs, alpha = model.predict_proba(x)
    return evaluate((probs >= 0.5).astype(int), y).overall_over(ACTIVE), x, alpha


def test_end_to_end_overfit(overfit):
    train, val, stage1, stage2 = overfit
    with criterion("end-to-end overfit") as notes:
        tr, _, _ = _f1(stage1.model, train)
        va, _, _ = _f1(stage1.model, val)
        va3, _, _ = _f1(stage2.model, val)
        notes.append(f"train F1 {tr:.3f}, val F1 {va:.3f} (epoch {stage1.best_epoch + 1}/30), "
                     f"after imbalanced retraining val F1 {va3:.3f}, final train loss {stage1.trace[-1].train_loss:.4f}")
        assert tr >= 0.99, f"train F1 {tr:.3f} < 0.99"
        assert va >= 0.9, f"val F1 {va:.3f} < 0.9"
        assert va - va3 <= 0.05, f"retraining dropped val F1 by {va - va3:.3f}"


def test_attention_prefers_signal(overfit):
    """Trained attention puts at least 80% of its mass on locals that see real signal."""
    train, _, stage1, _ = overfit
    with criterion("attention on non-padded positions (model invariant)") as notes:
        _, x, alpha = _f1(stage1.model, train)
        rf = receptive_fields(REDUCED)
        masses = []
        for xi, ai in zip(x, alpha):
            live = np.flatnonzero(np.any(xi != 0, axis=0))
            lo, hi = live[0], live[-1]
            real = (rf[:, 1] >= lo) & (rf[:, 0] <= hi)
            masses.append(ai[real].sum())
        masses = np.array(masses)
        notes.append(f"mean {masses.mean():.3f}, min {masses.min():.3f} over {len(masses)} training windows")
        assert masses.mean() >= 0.8


@pytest.fixture(scope="module")
def pool(corpus, tmp_path_factory):
    ds, folds = corpus
    configs = [PipelineConfig.default(1, epochs=12, **TRAIN_KW), PipelineConfig.default(2, epochs=12, **TRAIN_KW),
               PipelineConfig.default(3, epochs=5, **TRAIN_KW), PipelineConfig.default(4, epochs=12, **TRAIN_KW)]
    run = tmp_path_factory.mktemp("pool")
    return train_all(ds, configs, REDUCED, folds, run_dir=run, only_folds=[0, 1, 2])


def test_ensemble_sanity(pool):
    test = make_synthetic(seed=1, prefix="tst")
    with criterion("ensemble sanity") as notes:
        y = test.label_matrix()
        ens = ensemble_predict_dataset(pool, test)
        ens_f1 = evaluate(ens.labels, y).overall_over(ACTIVE)
        singles = [evaluate(p.labels, y).overall_over(ACTIVE) for p in member_predictions(pool, test).values()]
        rev = TrainedPool(list(reversed(pool.entries)), pool.fold_assignment, pool.configs)
        rot = TrainedPool(pool.entries[5:] + pool.entries[:5], pool.fold_assignment, pool.configs)
        same = all(np.array_equal(ensemble_predict_dataset(p, test).probs, ens.probs) for p in (rev, rot))
        notes.append(f"{len(pool)} members; ensemble F1 {ens_f1:.3f}, single median {np.median(singles):.3f} "
                     f"(range {min(singles):.3f}-{max(singles):.3f}); order invariant: {same}")
        assert ens_f1 >= np.median(singles)
        assert same


def test_determinism(tmp_path):
    data = make_synthetic({(0,): 5, (1,): 4, (2,): 3, (0, 1): 2, (1, 2): 2}, seed=4, seconds=(9, 10, 20, 40))
    m, lab = save_dataset(data, tmp_path / "data")
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nseed = 3\nfolds = 2\ntarget_length = 1000\njobs = 1\n"
                   f"manifest = {m}\nlabels = {lab}\n"
                   "[model]\nkernel_size = 8\nbase_channels = 4\nchannel_growth = 4\n"
                   "num_residual_modules = 3\nattention_hidden = 8\n"
                   "[pipeline]\nepochs = 2\nbatch_size = 8\nlr = 0.003\n")
    runs = []
    run = tmp_path / "run"  # same path both times, so config.resolved can match too
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
        assert main(["predict", "--pool", str(run), "--manifest", str(m)]) == 0
        assert main(["evaluate", "--pool", str(run), "--manifest", str(m), "--labels", str(lab)]) == 0
        runs.append(run.rename(tmp_path / name))
    with criterion("determinism") as notes:
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
        ckpts = [f for f in files if f.suffix == ".ckpt"]
        differ = [str(f) for f in files if not filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False)]
        notes.append(f"{len(files)} files compared ({len(ckpts)} checkpoints, predictions, report)")
        assert len(ckpts) == 8 and Path("predictions.csv") in files and Path("report.csv") in files
        assert not differ, f"differ: {differ}"
    shutil.rmtree(tmp_path / "data")
