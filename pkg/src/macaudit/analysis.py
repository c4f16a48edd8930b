"""Balanced accuracy, reliability-filtered accuracy tables, predictability classes, label correlations."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import UNDEFINED, LabelSet
from .errors import DegenerateError, RangeError, ShapeError
from .reliability import PredictionRecord, rcp_filter

DEFAULT_FRACTIONS = (1.0, 0.5)


class PredictabilityClass(enum.Enum):
    EASILY = "++"
    PREDICTABLE = "+"
    HARDLY = "0"


def balanced_accuracy(y_true, y_pred, n_classes: int = 2) -> float:
    """Mean per-class recall over ``n_classes`` classes."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ")
    support = np.bincount(y_true, minlength=n_classes)[:n_classes]
    if np.any(support == 0):
        raise DegenerateError(f"classes {np.flatnonzero(support == 0).tolist()} absent from y_true")
    hits = np.bincount(y_true[y_true == y_pred], minlength=n_classes)[:n_classes]
    return float(np.mean(hits / support))


@dataclass
class RcpRow:
    attribute: str
    acc_at: dict  # fraction -> balanced accuracy, None where undefined
    category: str = ""

    @property
    def predictability(self) -> PredictabilityClass | None:
        a100, a50 = self.acc_at.get(1.0), self.acc_at.get(0.5)
        if a100 is None or a50 is None:
            return None
        return assign_predictability(a100, a50)


def rcp_accuracy_table(records: Iterable[PredictionRecord], truth: LabelSet,
                       fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[RcpRow]:
    by_attr: dict[str, list] = {}
    for r in records:
        by_attr.setdefault(r.attribute, []).append(r)
    pos = {s: i for i, s in enumerate(truth.sample_ids)}
    rows = []
    for name in truth.names:
        recs = by_attr.get(name)
        if not recs:
            continue
        meta = truth.meta(name)
        col = truth.column(name)
        accs = {}
        for f in fractions:
            kept = rcp_filter(recs, f)
            y = np.array([col[pos[r.sample_id]] for r in kept])
            if np.any(y == UNDEFINED):
                raise DegenerateError(f"{name}: prediction for a sample without a defined label")
            try:
                accs[f] = balanced_accuracy(y, [r.predicted_class for r in kept], meta.n_out)
            except DegenerateError:
                accs[f] = None
        rows.append(RcpRow(name, accs, meta.category))
    return rows


def assign_predictability(acc100: float, acc50: float, threshold: float = 0.90) -> PredictabilityClass:
    if acc100 > threshold:
        return PredictabilityClass.EASILY
    if acc50 > threshold:
        return PredictabilityClass.PREDICTABLE
    return PredictabilityClass.HARDLY


def combine_embeddings(per_embedding: dict[str, tuple], policy: str = "first") -> tuple:
    """Collapse ``{embedding: (acc100, acc50)}`` into one pair before class assignment.

    ``first`` uses the first embedding listed; ``best`` takes the per-level maximum.
    """
    pairs = list(per_embedding.values())
    if not pairs:
        raise RangeError("no embeddings given")
    if policy == "first":
        return pairs[0]
    if policy == "best":
        return max(p[0] for p in pairs), max(p[1] for p in pairs)
    raise ValueError(f"unknown policy {policy!r}")


@dataclass
class CorrelationMatrix:
    attributes: list
    values: np.ndarray  # nan where undefined


def pearson_matrix(labels: LabelSet, attributes: Sequence[str] | None = None) -> CorrelationMatrix:
    """Pairwise Pearson coefficients over samples where both labels are defined."""
    names = list(attributes) if attributes is not None else labels.names
    cols = [labels.column(n).astype(np.float64) for n in names]
    defined = [labels.column(n) != UNDEFINED for n in names]
    k = len(names)
    out = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            both = defined[i] & defined[j]
            if both.sum() < 2:
                continue
            a = cols[i][both] - cols[i][both].mean()
            b = cols[j][both] - cols[j][both].mean()
            denom = math.sqrt(float(a @ a) * float(b @ b))
            if denom == 0.0:
                continue
            r = 1.0 if i == j else float(np.clip((a @ b) / denom, -1.0, 1.0))
            out[i, j] = out[j, i] = r
    return CorrelationMatrix(names, out)


def top_correlations(m: CorrelationMatrix, k: int = 15):
    """The ``k`` most positive and ``k`` most negative off-diagonal pairs.

    Each unordered pair appears once as ``(name_a, name_b, r)`` with
    ``name_a < name_b``; ties are broken by pair name.
    """
    pairs = []
    n = len(m.attributes)
    for i in range(n):
        for j in range(i + 1, n):
            r = m.values[i, j]
            if not np.isnan(r):
                a, b = sorted((m.attributes[i], m.attributes[j]))
                pairs.append((a, b, float(r)))
    if not 1 <= k <= len(pairs):
        raise RangeError(f"k={k} outside 1..{len(pairs)} defined pairs")
    positive = sorted(pairs, key=lambda p: (-p[2], p[0], p[1]))[:k]
    negative = sorted(pairs, key=lambda p: (p[2], p[0], p[1]))[:k]
    return positive, negative


# reports ----------------------------------------------------------------------

def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def rcp_column(fraction: float) -> str:
    return f"acc_rcp{round(fraction * 100):d}"


def write_rcp_table(rows: Sequence[RcpRow], fractions: Sequence[float], path) -> None:
    with_class = 1.0 in fractions and 0.5 in fractions
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", "category"] + [rcp_column(f) for f in fractions] + (["class"] if with_class else []))
        for row in rows:
            cells = [row.attribute, row.category] + [_fmt(row.acc_at.get(f)) for f in fractions]
            if with_class:
                cls = row.predictability
                cells.append(cls.value if cls else "")
            w.writerow(cells)


def category_summary(rows: Sequence[RcpRow]) -> dict[str, dict[PredictabilityClass, int]]:
    out: dict = {}
    for row in rows:
        cls = row.predictability
        if cls is None:
            continue
        counts = out.setdefault(row.category, {c: 0 for c in PredictabilityClass})
        counts[cls] += 1
    return out


def write_summary(rows: Sequence[RcpRow], path) -> None:
    summary = category_summary(rows)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "n_easily", "n_predictable", "n_hardly"])
        for cat in sorted(summary):
            c = summary[cat]
            w.writerow([cat, c[PredictabilityClass.EASILY], c[PredictabilityClass.PREDICTABLE], c[PredictabilityClass.HARDLY]])


def write_correlations(m: CorrelationMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(m.attributes))
        for name, row in zip(m.attributes, m.values):
            w.writerow([name] + [_fmt(v) for v in row])


def write_top_correlations(m: CorrelationMatrix, k: int, path) -> None:
    positive, negative = top_correlations(m, k)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sign", "attribute_a", "attribute_b", "pearson"])
        for sign, pairs in (("positive", positive), ("negative", negative)):
            for a, b, r in pairs:
                w.writerow([sign, a, b, repr(r)])
