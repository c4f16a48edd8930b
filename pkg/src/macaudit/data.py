"""Embedding and label ingestion, joins, the subject-exclusive split and class weights.

Label grids are ``int8`` arrays holding a class index per cell, with
``UNDEFINED`` (-1) for missing labels. Binary attributes use ``FALSE`` (0) and
``TRUE`` (1), which are also their class indices.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateError, ParseError, SplitError
from .numeric import RngStream

log = logging.getLogger(__name__)

UNDEFINED = -1
FALSE = 0
TRUE = 1

_CELL = {"1": TRUE, "0": FALSE, "?": UNDEFINED}
_CELL_OUT = {TRUE: "1", FALSE: "0", UNDEFINED: "?"}


@dataclass(frozen=True)
class AttributeMeta:
    name: str
    category: str = "Other"
    n_out: int = 2

    def __post_init__(self):
        if self.n_out < 2:
            raise ValueError(f"attribute {self.name!r} needs n_out >= 2, got {self.n_out}")


@dataclass
class EmbeddingSet:
    sample_ids: list[str]
    subject_ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        n = len(self.sample_ids)
        if len(self.subject_ids) != n or self.vectors.shape[0] != n:
            raise ValueError("sample_ids, subject_ids and vectors must have equal length")
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise ValueError("vectors must be n_samples x n_in with n_in >= 1")
        if len(set(self.sample_ids)) != n:
            raise ValueError("sample_ids must be unique")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_in(self) -> int:
        return self.vectors.shape[1]


@dataclass
class LabelSet:
    sample_ids: list[str]
    attributes: list[AttributeMeta]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.shape != (len(self.sample_ids), len(self.attributes)):
            raise ValueError(
                f"label grid shape {self.values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.attributes)} attributes"
            )
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def meta(self, name: str) -> AttributeMeta:
        return self.attributes[self.names.index(name)]


@dataclass
class SplitAssignment:
    train_sample_ids: set[str] = field(default_factory=set)
    test_sample_ids: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.train_sample_ids & self.test_sample_ids:
            raise SplitError("train and test sample sets overlap")


@dataclass
class Dataset:
    """Embeddings joined with labels: the in-memory form training consumes."""

    sample_ids: list[str]
    subject_ids: list[str]
    x: np.ndarray
    y: np.ndarray  # n_samples x n_attributes, class index or UNDEFINED
    attributes: list[AttributeMeta]

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, ids) -> "Dataset":
        ids = set(ids)
        idx = [i for i, s in enumerate(self.sample_ids) if s in ids]
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            [self.sample_ids[i] for i in idx],
            [self.subject_ids[i] for i in idx],
            self.x[idx],
            self.y[idx],
            self.attributes,
        )

    def labels(self) -> LabelSet:
        return LabelSet(list(self.sample_ids), list(self.attributes), self.y.copy())


def _open_csv(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    return path.open(newline="", encoding="utf-8")


def load_embeddings(path) -> EmbeddingSet:
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[:2] != ["sample_id", "subject_id"]:
            raise ParseError("header must be sample_id,subject_id,e0,...", path, 1)
        n_in = len(header) - 2
        sample_ids, subject_ids, rows = [], [], []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_in + 2:
                raise ParseError(f"expected {n_in + 2} fields, got {len(row)}", path, line_no)
            sid = row[0]
            if sid in seen:
                raise ParseError(f"duplicate sample_id {sid!r}", path, line_no)
            seen.add(sid)
            try:
                vec = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", path, line_no) from None
            if not all(math.isfinite(v) for v in vec):
                raise ParseError("non-finite cell", path, line_no)
            sample_ids.append(sid)
            subject_ids.append(row[1])
            rows.append(vec)
    if not rows:
        raise ParseError("no samples", path)
    return EmbeddingSet(sample_ids, subject_ids, np.array(rows, dtype=np.float64))


def save_embeddings(emb: EmbeddingSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "subject_id"] + [f"e{i}" for i in range(emb.n_in)])
        for sid, subj, vec in zip(emb.sample_ids, emb.subject_ids, emb.vectors):
            w.writerow([sid, subj] + [repr(float(v)) for v in vec])


def load_attribute_meta(path) -> list[AttributeMeta]:
    """Read ``name,category,n_out`` records; blank lines and ``#`` comments are skipped."""
    metas = []
    with _open_csv(path) as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if row == ["name", "category", "n_out"]:
                continue
            if len(row) != 3:
                raise ParseError("expected name,category,n_out", path, line_no)
            try:
                metas.append(AttributeMeta(row[0], row[1], int(row[2])))
            except ValueError as exc:
                raise ParseError(str(exc), path, line_no) from None
    if len({m.name for m in metas}) != len(metas):
        raise ParseError("duplicate attribute name", path)
    return metas


def save_attribute_meta(metas: Sequence[AttributeMeta], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for m in metas:
            w.writerow([m.name, m.category, m.n_out])


def _parse_cell(cell: str, meta: AttributeMeta):
    if cell in _CELL:
        return _CELL[cell]
    if meta.n_out > 2 and cell.isdigit() and int(cell) < meta.n_out:
        return int(cell)
    return None


def load_labels(path, metas: Sequence[AttributeMeta]) -> LabelSet:
    by_name = {m.name: m for m in metas}
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise ParseError("header must start with sample_id", path, 1)
        columns = header[1:]
        for col in columns:
            if col not in by_name:
                raise ParseError(f"unknown attribute column {col!r}", path, 1)
        if len(set(columns)) != len(columns):
            raise ParseError("duplicate attribute column", path, 1)
        col_metas = [by_name[c] for c in columns]
        sample_ids, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line_no)
            vals = []
            for cell, meta in zip(row[1:], col_metas):
                v = _parse_cell(cell.strip(), meta)
                if v is None:
                    raise ParseError(f"illegal value {cell!r} for {meta.name!r}", path, line_no)
                vals.append(v)
            sample_ids.append(row[0])
            rows.append(vals)
    if len(set(sample_ids)) != len(sample_ids):
        raise ParseError("duplicate sample_id", path)
    values = np.array(rows, dtype=np.int8).reshape(len(rows), len(col_metas))
    return LabelSet(sample_ids, col_metas, values)


def save_labels(labels: LabelSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + labels.names)
        for sid, row in zip(labels.sample_ids, labels.values):
            w.writerow([sid] + [_CELL_OUT.get(int(v), str(int(v))) for v in row])


def join(emb: EmbeddingSet, labels: LabelSet) -> Dataset:
    """Inner join on sample_id, keeping embedding row order."""
    pos = {s: i for i, s in enumerate(labels.sample_ids)}
    keep = [i for i, s in enumerate(emb.sample_ids) if s in pos]
    dropped = (emb.n_samples - len(keep)) + (len(labels.sample_ids) - len(keep))
    if dropped:
        log.info("join dropped %d samples present in only one of embeddings/labels", dropped)
    rows = [pos[emb.sample_ids[i]] for i in keep]
    return Dataset(
        [emb.sample_ids[i] for i in keep],
        [emb.subject_ids[i] for i in keep],
        emb.vectors[keep],
        labels.values[rows] if rows else np.zeros((0, len(labels.attributes)), np.int8),
        list(labels.attributes),
    )


def subject_exclusive_split(emb, train_fraction: float, rng: RngStream) -> SplitAssignment:
    """Shuffle subjects, then fill the train side until it first reaches the target size.

    ``emb`` may be an :class:`EmbeddingSet` or a :class:`Dataset`.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_subject: dict[str, list[str]] = {}
    for sid, subj in zip(emb.sample_ids, emb.subject_ids):
        by_subject.setdefault(subj, []).append(sid)
    if len(by_subject) < 2:
        raise SplitError(f"need at least 2 distinct subjects, got {len(by_subject)}")
    # sort first so the shuffle does not depend on file order of first appearance
    subjects = sorted(by_subject)
    order = rng.permutation(len(subjects))
    target = train_fraction * len(emb.sample_ids)
    train, test = set(), set()
    for i in order:
        members = by_subject[subjects[i]]
        if len(train) < target:
            train.update(members)
        else:
            test.update(members)
    return SplitAssignment(train, test)


def save_split(split: SplitAssignment, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "side"])
        for sid in sorted(split.train_sample_ids):
            w.writerow([sid, "train"])
        for sid in sorted(split.test_sample_ids):
            w.writerow([sid, "test"])


def load_split(path) -> SplitAssignment:
    train, test = set(), set()
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["sample_id", "side"]:
            raise ParseError("header must be sample_id,side", path, 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1] not in ("train", "test"):
                raise ParseError("expected sample_id,train|test", path, line_no)
            (train if row[1] == "train" else test).add(row[0])
    return SplitAssignment(train, test)


def class_balance_weights(column, n_classes: int = 2) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * N_c)`` over the defined entries of ``column``."""
    column = np.asarray(column)
    defined = column[column != UNDEFINED]
    counts = np.bincount(defined.astype(np.intp), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        missing = [c for c in range(n_classes) if counts[c] == 0]
        raise DegenerateError(f"classes {missing} have no defined samples")
    return defined.size / (n_classes * counts.astype(np.float64))
