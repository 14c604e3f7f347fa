"""Loading, validating, persisting and partitioning 12-lead ECG datasets.

On-disk layout (all plain CSV)::

    manifest.csv   id,path,fs,length        (path relative to the manifest)
    labels.csv     id,labels                (labels joined by '|', may be empty)
    <id>.csv       12 columns per row, lead order I..V6, millivolts
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import CLASSES, LEADS, NUM_CLASSES
from .errors import DataError

REPLICA_SEP = "#"
_CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}


@dataclass(frozen=True, eq=False)
class EcgRecording:
    id: str
    fs: float
    leads: np.ndarray  # (12, L)

    def __post_init__(self):
        leads = np.asarray(self.leads)
        if leads.ndim != 2 or leads.shape[0] != len(LEADS):
            raise DataError(f"{self.id}: expected 12 lead rows, got shape {leads.shape}")
        if leads.shape[1] < 1:
            raise DataError(f"{self.id}: empty recording")
        if not self.fs > 0:
            raise DataError(f"{self.id}: sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(leads)):
            raise DataError(f"{self.id}: non-finite sample values")
        object.__setattr__(self, "leads", leads)

    @property
    def length(self) -> int:
        return self.leads.shape[1]

    @property
    def seconds(self) -> float:
        return self.length / self.fs

    def replace(self, leads: np.ndarray | None = None, id: str | None = None) -> "EcgRecording":
        return EcgRecording(id=self.id if id is None else id, fs=self.fs,
                            leads=self.leads if leads is None else leads)


def base_id(record_id: str) -> str:
    """Strip a replica suffix: ``"r1#3"`` -> ``"r1"``."""
    return record_id.split(REPLICA_SEP, 1)[0]


def encode_labels(text: str) -> np.ndarray:
    """Parse ``"AF|PVC"`` into a 9-element 0/1 vector in the fixed class order."""
    bits = np.zeros(NUM_CLASSES, dtype=np.uint8)
    text = text.strip()
    if not text:
        return bits
    for name in text.split("|"):
        name = name.strip()
        if name not in _CLASS_INDEX:
            raise DataError(f"unknown label {name!r}; expected one of {', '.join(CLASSES)}")
        bits[_CLASS_INDEX[name]] = 1
    return bits


def decode_labels(bits: Sequence[int]) -> str:
    return "|".join(CLASSES[j] for j, b in enumerate(bits) if b)


def labels_from_indices(indices: Iterable[int]) -> np.ndarray:
    bits = np.zeros(NUM_CLASSES, dtype=np.uint8)
    for j in indices:
        if not 0 <= j < NUM_CLASSES:
            raise DataError(f"class index {j} out of range")
        bits[j] = 1
    return bits


@dataclass(frozen=True, eq=False)
class Sample:
    rec: EcgRecording
    labels: np.ndarray  # (9,) uint8

    @property
    def id(self) -> str:
        return self.rec.id


@dataclass(eq=False)
class Dataset:
    records: list[Sample]
    manifest_path: Path | None = None

    def __post_init__(self):
        seen = set()
        for s in self.records:
            if s.id in seen:
                raise DataError(f"duplicate record id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.records]

    def label_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, NUM_CLASSES), dtype=np.uint8)
        return np.stack([s.labels for s in self.records])

    def class_counts(self) -> np.ndarray:
        return self.label_matrix().sum(axis=0).astype(int)

    def subset(self, keep) -> "Dataset":
        return Dataset([s for s in self.records if keep(s)], self.manifest_path)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.records}


def _read_csv(path: Path, header: list[str]) -> list[tuple[int, list[str]]]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != header:
        raise DataError(f"{path}:1: expected header {','.join(header)!r}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        out.append((lineno, row))
    return out


def load_signal(path: Path) -> np.ndarray:
    """Read a ``<id>.csv`` signal file into a (12, L) float64 matrix."""
    if not path.is_file():
        raise DataError(f"missing signal file: {path}")
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed signal file ({exc})") from exc
    if data.shape[1] != len(LEADS):
        raise DataError(f"{path}: expected 12 columns, got {data.shape[1]}")
    return np.ascontiguousarray(data.T)


def save_signal(path: Path, leads: np.ndarray) -> None:
    # repr() gives the shortest string that round-trips a float64
    with path.open("w") as fh:
        for row in np.asarray(leads, dtype=np.float64).T.tolist():
            fh.write(",".join(map(repr, row)))
            fh.write("\n")


def load_dataset(manifest_path, labels_path=None) -> Dataset:
    """Load and validate a dataset.

    With ``labels_path=None`` every record gets an empty label set, which is
    what prediction on unlabeled data needs.
    """
    manifest_path = Path(manifest_path)
    rows = _read_csv(manifest_path, ["id", "path", "fs", "length"])
    labels: dict[str, np.ndarray] | None = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        labels = {}
        for lineno, (rid, text) in _read_csv(labels_path, ["id", "labels"]):
            if rid in labels:
                raise DataError(f"{labels_path}:{lineno}: duplicate id {rid!r}")
            try:
                labels[rid] = encode_labels(text)
            except DataError as exc:
                raise DataError(f"{labels_path}:{lineno}: {exc}") from None

    records = []
    seen = set()
    root = manifest_path.parent
    for lineno, (rid, rel, fs_text, len_text) in rows:
        where = f"{manifest_path}:{lineno}"
        if rid in seen:
            raise DataError(f"{where}: duplicate id {rid!r}")
        seen.add(rid)
        try:
            fs = float(fs_text)
            length = int(len_text)
        except ValueError:
            raise DataError(f"{where}: malformed fs/length {fs_text!r},{len_text!r}") from None
        leads = load_signal(root / rel)
        if leads.shape[1] != length:
            raise DataError(f"{where}: manifest length {length} but file has {leads.shape[1]} samples")
        if labels is not None and rid not in labels:
            raise DataError(f"{where}: record {rid!r} has no label row")
        try:
            rec = EcgRecording(rid, fs, leads)
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        bits = labels[rid] if labels is not None else np.zeros(NUM_CLASSES, np.uint8)
        records.append(Sample(rec, bits))
    if labels is not None:
        extra = sorted(set(labels) - seen)
        if extra:
            raise DataError(f"{labels_path}: labels for ids missing from manifest: {', '.join(extra[:5])}")
    return Dataset(records, manifest_path)


def save_dataset(ds: Dataset, out_dir, with_labels: bool = True) -> tuple[Path, Path]:
    """Write ``manifest.csv``, ``labels.csv`` and one signal file per record."""
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    labels = out / "labels.csv"
    with manifest.open("w", newline="") as mf, labels.open("w", newline="") as lf:
        mw, lw = csv.writer(mf, lineterminator="\n"), csv.writer(lf, lineterminator="\n")
        mw.writerow(["id", "path", "fs", "length"])
        lw.writerow(["id", "labels"])
        for s in ds:
            rel = f"signals/{s.id}.csv"
            save_signal(out / rel, s.rec.leads)
            mw.writerow([s.id, rel, repr(float(s.rec.fs)), s.rec.length])
            if with_labels:
                lw.writerow([s.id, decode_labels(s.labels)])
    return manifest, labels


@dataclass(frozen=True)
class FoldAssignment:
    folds: dict[str, int]
    seed: int
    k: int = 10

    def fold_of(self, record_id: str) -> int:
        """Fold of a record; replicas (``id#k``) inherit their base id's fold."""
        return self.folds[base_id(record_id)]

    def members(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.folds.items() if f == fold)

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.folds.values():
            counts[f] += 1
        return counts


def split_folds(ids: Dataset | Iterable[str], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle the sorted base ids with ``seed``, then deal them round-robin."""
    if isinstance(ids, Dataset):
        ids = ids.ids
    unique = sorted({base_id(i) for i in ids})
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    if not unique:
        raise DataError("cannot split an empty dataset")
    if k > len(unique):
        raise DataError(f"k={k} exceeds the number of records ({len(unique)})")
    order = np.random.default_rng(seed).permutation(len(unique))
    folds = {unique[idx]: pos % k for pos, idx in enumerate(order)}
    return FoldAssignment(folds=folds, seed=seed, k=k)

