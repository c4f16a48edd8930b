"""Turning continuous attribute scores into trinary labels.

The threshold search itself is a manual loop: a person inspects the samples
nearest a candidate threshold and keeps moving it outwards until nine of ten
look correctly labelled. :func:`threshold_probe` returns those samples; the
chosen thresholds come back in through a threshold file.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FALSE, TRUE, UNDEFINED, AttributeMeta, LabelSet, SplitAssignment
from .errors import DataError, ParseError, RangeError

MIN_COUNT = 100
PROBE_SIZE = 10


@dataclass(frozen=True)
class ThresholdPair:
    attribute: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"{self.attribute}: lower {self.lower} > upper {self.upper}")


@dataclass(frozen=True)
class SufficiencyFlag:
    attribute: str
    train_pos: int
    train_neg: int
    test_pos: int
    test_neg: int
    min_count: int = MIN_COUNT

    @property
    def sufficient(self) -> bool:
        return min(self.train_pos, self.train_neg, self.test_pos, self.test_neg) >= self.min_count


def binarize_scores(scores, t: ThresholdPair) -> np.ndarray:
    """TRUE strictly above ``upper``, FALSE strictly below ``lower``, else UNDEFINED."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(np.isnan(scores)):
        raise DataError(f"{t.attribute}: NaN score")
    out = np.full(scores.shape, UNDEFINED, dtype=np.int8)
    out[scores > t.upper] = TRUE
    out[scores < t.lower] = FALSE
    return out


def threshold_probe(scores, ids: Sequence[str], candidate: float, k: int = PROBE_SIZE) -> list[str]:
    """The ``k`` sample ids whose score is closest to ``candidate`` (ties by id)."""
    if len(scores) != len(ids):
        raise ValueError("scores and ids differ in length")
    if not 1 <= k <= len(ids):
        raise RangeError(f"k={k} outside 1..{len(ids)}")
    dist = [abs(float(s) - candidate) for s in scores]
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    return [ids[i] for i in order[:k]]


def sufficiency_filter(labels: LabelSet, split: SplitAssignment, min_count: int = MIN_COUNT) -> list[SufficiencyFlag]:
    in_train = np.array([s in split.train_sample_ids for s in labels.sample_ids], dtype=bool)
    in_test = np.array([s in split.test_sample_ids for s in labels.sample_ids], dtype=bool)
    flags = []
    for j, name in enumerate(labels.names):
        col = labels.values[:, j]
        flags.append(
            SufficiencyFlag(
                name,
                int(np.sum(in_train & (col == TRUE))),
                int(np.sum(in_train & (col == FALSE))),
                int(np.sum(in_test & (col == TRUE))),
                int(np.sum(in_test & (col == FALSE))),
                min_count,
            )
        )
    return flags


def load_thresholds(path) -> dict[str, ThresholdPair]:
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#") or row == ["attribute", "lower", "upper"]:
                continue
            if len(row) != 3:
                raise ParseError("expected attribute,lower,upper", path, line_no)
            try:
                lo, hi = float(row[1]), float(row[2])
                if not (math.isfinite(lo) and math.isfinite(hi)):
                    raise ValueError("thresholds must be finite")
                pair = ThresholdPair(row[0], lo, hi)
            except ValueError as exc:
                raise ParseError(str(exc), path, line_no) from None
            if pair.attribute in out:
                raise ParseError(f"duplicate attribute {pair.attribute!r}", path, line_no)
            out[pair.attribute] = pair
    return out


def load_scores(path) -> tuple[list[str], list[str], np.ndarray]:
    """Continuous score CSV: ``sample_id,<attr1>,...`` with real-valued cells."""
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id" or len(header) < 2:
            raise ParseError("header must be sample_id,<attr>,...", path, 1)
        ids, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line_no)
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError("non-numeric score", path, line_no) from None
            ids.append(row[0])
    return ids, header[1:], np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def clean_labels(ids, names, scores, thresholds: dict[str, ThresholdPair], metas: Sequence[AttributeMeta]) -> LabelSet:
    by_name = {m.name: m for m in metas}
    missing = [n for n in names if n not in thresholds]
    if missing:
        raise DataError(f"no threshold for attributes {missing}")
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise DataError(f"attributes {unknown} missing from metadata")
    cols = [binarize_scores(scores[:, j], thresholds[n]) for j, n in enumerate(names)]
    values = np.stack(cols, axis=1) if cols else np.zeros((len(ids), 0), np.int8)
    return LabelSet(list(ids), [by_name[n] for n in names], values)


def label_reduction(labels: LabelSet) -> dict[str, float]:
    """Share of labels lost to the undefined band, counted two ways.

    ``cells``: fraction of sample-attribute cells that are undefined.
    ``samples``: fraction of samples with at least one undefined cell.
    """
    undef = labels.values == UNDEFINED
    n_cells = undef.size
    n_samples = undef.shape[0]
    return {
        "cells": float(undef.sum() / n_cells) if n_cells else 0.0,
        "samples": float(undef.any(axis=1).sum() / n_samples) if n_samples else 0.0,
    }


def write_sufficiency(flags: Sequence[SufficiencyFlag], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", "train_pos", "train_neg", "test_pos", "test_neg", "sufficient"])
        for f in flags:
            w.writerow([f.attribute, f.train_pos, f.train_neg, f.test_pos, f.test_neg, int(f.sufficient)])
