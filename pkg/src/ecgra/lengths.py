"""Length unification, length redistribution and class balancing.

Every recording ends up exactly ``target`` samples long: shorter ones are
zero-padded at a random split between the two ends, longer ones are cut to a
random contiguous window. The augmentation plans decide how many windowed
copies of each recording to draw, and from which (possibly truncated) length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError
from .store import REPLICA_SEP, Dataset, EcgRecording, Sample

TARGET_LENGTH = 15000
MAX_SECONDS = 30

SeedLike = int | Sequence[int] | np.random.Generator


def pad_random(leads: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    leads = np.asarray(leads)
    n = leads.shape[-1]
    if n > target:
        raise ValueError(f"cannot pad length {n} down to {target}")
    p = int(rng.integers(0, target - n + 1)) if n < target else 0
    out = np.zeros(leads.shape[:-1] + (target,), dtype=leads.dtype)
    out[..., p:p + n] = leads
    return out


def truncate_random(leads: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    leads = np.asarray(leads)
    n = leads.shape[-1]
    if n < target:
        raise ValueError(f"cannot truncate length {n} up to {target}")
    s = int(rng.integers(0, n - target + 1)) if n > target else 0
    return leads[..., s:s + target].copy()


def unify_length(rec: EcgRecording, target: int = TARGET_LENGTH,
                 rng: np.random.Generator | None = None) -> EcgRecording:
    rng = rng if rng is not None else np.random.default_rng(0)
    if rec.length <= target:
        leads = pad_random(rec.leads, target, rng)
    else:
        leads = truncate_random(rec.leads, target, rng)
    return rec.replace(leads=leads)


def length_bucket(length: int, fs: float, max_seconds: int = MAX_SECONDS) -> int:
    """Whole seconds (floored), with everything past ``max_seconds`` lumped together."""
    return min(int(length // fs), max_seconds)


@dataclass
class LengthHistogram:
    counts: np.ndarray  # index = whole seconds, 0..max_seconds

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        t = self.total
        return self.counts / t if t else np.zeros_like(self.counts, dtype=float)

    def nonzero(self) -> dict[int, int]:
        return {int(b): int(c) for b, c in enumerate(self.counts) if c}


def length_histogram(ds: Dataset | Sequence[Sample], max_seconds: int = MAX_SECONDS) -> LengthHistogram:
    counts = np.zeros(max_seconds + 1, dtype=int)
    for s in ds:
        counts[length_bucket(s.rec.length, s.rec.fs, max_seconds)] += 1
    return LengthHistogram(counts)


@dataclass(frozen=True)
class PlanEntry:
    id: str
    target_length: int
    copies: int


@dataclass
class AugmentationPlan:
    entries: list[PlanEntry] = field(default_factory=list)
    mode: str = "identity"

    @property
    def total_copies(self) -> int:
        return sum(e.copies for e in self.entries)

    def extra_copies(self, ds: Dataset) -> int:
        """Outputs beyond one per source recording; 0 means nothing is augmented."""
        return self.total_copies - len(ds)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "target_length", "copies"])
            for e in self.entries:
                w.writerow([e.id, e.target_length, e.copies])

    @classmethod
    def read_csv(cls, path, mode: str = "file") -> "AugmentationPlan":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["id", "target_length", "copies"]:
            raise DataError(f"{path}: expected header id,target_length,copies")
        entries = []
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                entries.append(PlanEntry(row[0], int(row[1]), int(row[2])))
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed plan row {row!r}") from None
        return cls(entries, mode)


class _PlanBuilder:
    """Mutable bookkeeping of (source record, target length) -> copies."""

    def __init__(self, ds: Dataset, max_seconds: int):
        self.ds = ds
        self.max_seconds = max_seconds
        self.labels = ds.label_matrix().astype(bool)
        self.keys: list[tuple[int, int]] = []
        self.copies: list[int] = []
        self.index: dict[tuple[int, int], int] = {}
        for i, s in enumerate(ds):
            self.add(i, s.rec.length)

    def add(self, src: int, length: int, n: int = 1) -> int:
        key = (src, length)
        if key not in self.index:
            self.index[key] = len(self.keys)
            self.keys.append(key)
            self.copies.append(0)
        k = self.index[key]
        self.copies[k] += n
        return k

    def bucket(self, k: int) -> int:
        src, length = self.keys[k]
        return length_bucket(length, self.ds.records[src].rec.fs, self.max_seconds)

    def entry_labels(self) -> np.ndarray:
        return self.labels[[src for src, _ in self.keys]]

    def class_counts(self) -> np.ndarray:
        return (self.entry_labels() * np.asarray(self.copies)[:, None]).sum(axis=0)

    def plan(self, mode: str) -> AugmentationPlan:
        order = sorted(range(len(self.keys)), key=lambda k: (self.keys[k][0], -self.keys[k][1]))
        entries = [PlanEntry(self.ds.records[self.keys[k][0]].id, self.keys[k][1], self.copies[k])
                   for k in order]
        return AugmentationPlan(entries, mode)


def _active_classes(ds: Dataset, require_all: bool) -> list[int]:
    counts = ds.class_counts()
    if require_all and (counts == 0).any():
        missing = [j for j, c in enumerate(counts) if c == 0]
        raise DataError(f"classes {missing} have no recordings")
    active = [j for j, c in enumerate(counts) if c > 0]
    if not active:
        raise DataError("dataset has no labeled recordings")
    return active


def _largest_remainder(total: int, weights: dict[int, int]) -> dict[int, int]:
    """Split ``total`` in proportion to integer ``weights``; each share is floor or ceil."""
    wsum = sum(weights.values())
    shares = {b: total * w // wsum for b, w in weights.items()}
    rest = total - sum(shares.values())
    by_remainder = sorted(weights, key=lambda b: (-(total * weights[b] % wsum), b))
    for b in by_remainder[:rest]:
        shares[b] += 1
    return shares


def label_groups(ds: Dataset) -> dict[tuple[int, ...], list[int]]:
    """Record indices keyed by their exact label set (unlabeled records excluded)."""
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, s in enumerate(ds):
        key = tuple(int(j) for j in np.flatnonzero(s.labels))
        if key:
            groups.setdefault(key, []).append(i)
    return dict(sorted(groups.items()))


def _redistribute(builder: _PlanBuilder, tiebreak: np.ndarray) -> None:
    # Reshaping each exact label-set group to the global histogram makes every
    # class (a union of groups) match too, without cross-class feedback.
    ds = builder.ds
    global_counts = length_histogram(ds, builder.max_seconds).counts
    for members in label_groups(ds).values():
        top = max(builder.bucket(i) for i in members)  # entry i is original record i
        reachable = {b: int(global_counts[b]) for b in range(top + 1) if global_counts[b]}
        current = dict.fromkeys(reachable, 0)
        for i in members:
            current[builder.bucket(i)] += 1
        g_total = sum(reachable.values())
        size = max(-(-current[b] * g_total // w) for b, w in reachable.items())
        wanted = _largest_remainder(size, reachable)
        for b in sorted(reachable):
            need = wanted[b] - current[b]
            if need <= 0:
                continue
            same = [(i, ds.records[i].rec.length) for i in members if builder.bucket(i) == b]
            if same:
                cands = same
            else:
                cands = []
                for i in members:
                    rec = ds.records[i].rec
                    if builder.bucket(i) > b:
                        cands.append((i, int(math.ceil(b * rec.fs))))
            for _ in range(need):
                def key(cand):
                    k = builder.index.get(cand)
                    return (builder.copies[k] if k is not None else 0, tiebreak[cand[0]])
                builder.add(*min(cands, key=key))


def _balance(builder: _PlanBuilder, classes: list[int], tiebreak: np.ndarray) -> None:
    base = np.asarray(builder.copies, dtype=float)
    added = np.zeros(len(builder.keys))
    labels = builder.entry_labels()
    n_labels = labels.sum(axis=1)
    order = tiebreak[[src for src, _ in builder.keys]]
    counts = builder.class_counts()
    cls = np.asarray(classes)
    while True:
        top = counts[cls].max()
        if top - counts[cls].min() <= 1:
            return
        at_top = cls[counts[cls] >= top]
        blocked = labels[:, at_top].any(axis=1)
        picked = None
        for c in cls[np.argsort(counts[cls], kind="stable")]:
            if counts[c] >= top - 1:
                break
            ok = labels[:, c] & ~blocked
            if ok.any():
                # fewest extra labels first, then spread copies evenly
                score = np.where(ok, n_labels * 1e9 + (added / base) * 1e3 + order / len(order), np.inf)
                picked = int(np.argmin(score))
                break
        if picked is None:
            return  # remaining gap only closable by also raising the largest class
        builder.copies[picked] += 1
        added[picked] += 1
        counts += labels[picked]


def build_redistribution_plan(ds: Dataset, seed: int = 0, max_seconds: int = MAX_SECONDS,
                              require_all_classes: bool = False) -> AugmentationPlan:
    """Augment each class so its length histogram matches the global one.

    The work is done per exact label-set group, so a multi-label recording
    counts in every class it carries. Buckets a group cannot reach (no member
    at least that long) are left out of its target and the rest renormalized.
    """
    _active_classes(ds, require_all_classes)
    builder = _PlanBuilder(ds, max_seconds)
    tiebreak = np.random.default_rng(seed).permutation(len(ds))
    _redistribute(builder, tiebreak)
    return builder.plan("redistribute")


@dataclass(frozen=True)
class ClassFit:
    """How far one class's planned length histogram sits from the global one."""
    cls: int
    size: int          # planned windows carrying the class
    groups: int        # label-set groups containing the class
    dropped: float     # worst unreachable global mass over those groups
    distance: float    # max-norm gap between normalized histograms

    @property
    def bound(self) -> float:
        # each group's bucket counts are within one of its exact share, and
        # renormalizing after dropping mass d shifts a share by at most d/(1-d)
        return self.groups / self.size + self.dropped / (1.0 - self.dropped)


def redistribution_fit(ds: Dataset, plan: AugmentationPlan, max_seconds: int = MAX_SECONDS) -> list[ClassFit]:
    lookup = ds.by_id()
    g = length_histogram(ds, max_seconds).normalized()
    groups = label_groups(ds)
    out = []
    for c in np.flatnonzero(ds.class_counts()):
        hist = np.zeros(max_seconds + 1)
        for e in plan.entries:
            s = lookup[e.id]
            if s.labels[c]:
                hist[length_bucket(e.target_length, s.rec.fs, max_seconds)] += e.copies
        mine = [m for key, m in groups.items() if c in key]
        dropped = 0.0
        for members in mine:
            top = max(length_bucket(ds.records[i].rec.length, ds.records[i].rec.fs, max_seconds) for i in members)
            dropped = max(dropped, float(g[top + 1:].sum()))
        size = int(hist.sum())
        out.append(ClassFit(int(c), size, len(mine), dropped, float(np.abs(hist / size - g).max())))
    return out


def build_balancing_plan(ds: Dataset, seed: int = 0, require_all_classes: bool = False) -> AugmentationPlan:
    classes = _active_classes(ds, require_all_classes)
    builder = _PlanBuilder(ds, MAX_SECONDS)
    _balance(builder, classes, np.random.default_rng(seed).permutation(len(ds)))
    return builder.plan("balance")


def build_plan(ds: Dataset, mode: str, seed: int = 0, max_seconds: int = MAX_SECONDS,
               require_all_classes: bool = False) -> AugmentationPlan:
    """``identity``, ``redistribute``, ``balance`` or ``both`` (redistribute, then balance)."""
    if mode == "identity":
        return identity_plan(ds)
    if mode == "redistribute":
        return build_redistribution_plan(ds, seed, max_seconds, require_all_classes)
    if mode == "balance":
        return build_balancing_plan(ds, seed, require_all_classes)
    if mode != "both":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    classes = _active_classes(ds, require_all_classes)
    builder = _PlanBuilder(ds, max_seconds)
    tiebreak = np.random.default_rng(seed).permutation(len(ds))
    _redistribute(builder, tiebreak)
    _balance(builder, classes, tiebreak)
    return builder.plan("both")


def identity_plan(ds: Dataset) -> AugmentationPlan:
    return AugmentationPlan([PlanEntry(s.id, s.rec.length, 1) for s in ds], "identity")


def _stream(seed: SeedLike, *keys: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        seed = [int(seed.integers(2 ** 32))]
    elif isinstance(seed, (int, np.integer)):
        seed = [int(seed)]
    return np.random.default_rng([*seed, *keys])


def plan_items(plan: AugmentationPlan) -> list[tuple[int, int, int]]:
    """Flatten a plan into (entry index, copy index, replica number) triples."""
    items, per_id = [], {}
    for e_idx, e in enumerate(plan.entries):
        for c in range(e.copies):
            n = per_id.get(e.id, 0)
            per_id[e.id] = n + 1
            items.append((e_idx, c, n))
    return items


def materialize(sample: Sample, entry: PlanEntry, rng: np.random.Generator, target: int,
                replica: int) -> Sample:
    rec = sample.rec
    if entry.target_length > rec.length:
        raise DataError(f"{entry.id}: plan asks for {entry.target_length} samples, record has {rec.length}")
    leads = rec.leads
    if entry.target_length < rec.length:
        leads = truncate_random(leads, entry.target_length, rng)
    leads = pad_random(leads, target, rng) if leads.shape[-1] <= target else truncate_random(leads, target, rng)
    return Sample(EcgRecording(f"{rec.id}{REPLICA_SEP}{replica}", rec.fs, leads), sample.labels.copy())


def iter_plan(ds: Dataset, plan: AugmentationPlan, target: int = TARGET_LENGTH,
              seed: SeedLike = 0) -> Iterator[Sample]:
    lookup = ds.by_id()
    for e in plan.entries:
        if e.id not in lookup:
            raise DataError(f"plan references unknown record {e.id!r}")
    if isinstance(seed, np.random.Generator):
        seed = [int(seed.integers(2 ** 32))]
    for e_idx, c, n in plan_items(plan):
        e = plan.entries[e_idx]
        yield materialize(lookup[e.id], e, _stream(seed, e_idx, c), target, n)


def apply_plan(ds: Dataset, plan: AugmentationPlan, target: int = TARGET_LENGTH,
               seed: SeedLike = 0) -> Dataset:
    """Emit every planned copy at exactly ``target`` samples; ids become ``<id>#<k>``."""
    return Dataset(list(iter_plan(ds, plan, target, seed)), ds.manifest_path)
