"""Re-derive the class markers and sufficiency flags of the transcribed reference tables.

    python3 scripts/check_reference_tables.py
"""
import csv
import sys
from pathlib import Path

import numpy as np

from macaudit.analysis import assign_predictability
from macaudit.data import AttributeMeta, LabelSet, SplitAssignment
from macaudit.labelprep import sufficiency_filter

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def read(name):
    with (FIXTURES / name).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def class_table():
    bad = 0
    print(f"{'attribute':<22}{'acc100':>8}{'acc50':>8}  printed  derived")
    for r in read("celeba_facenet_classes.csv"):
        got = assign_predictability(float(r["acc100_pct"]) / 100, float(r["acc50_pct"]) / 100).value
        bad += got != r["marker"]
        flag = "" if got == r["marker"] else "  <-- mismatch"
        print(f"{r['attribute']:<22}{r['acc100_pct']:>8}{r['acc50_pct']:>8}  {r['marker']:<7}  {got}{flag}")
    return bad


def sufficiency_table():
    rows = read("lfw_insufficient_counts.csv")
    keys = ("train_pos", "train_neg", "test_pos", "test_neg")
    n = sum(sum(int(r[k]) for k in keys) for r in rows)
    values = np.full((n, len(rows)), -1, dtype=np.int8)
    ids = [f"s{i}" for i in range(n)]
    train, test = set(), set()
    i = 0
    for j, r in enumerate(rows):
        for key in keys:
            for _ in range(int(r[key])):
                values[i, j] = 1 if key.endswith("pos") else 0
                (train if key.startswith("train") else test).add(ids[i])
                i += 1
    flags = sufficiency_filter(LabelSet(ids, [AttributeMeta(r["attribute"]) for r in rows], values),
                               SplitAssignment(train, test))
    print(f"\n{'attribute':<22}{'tr+':>6}{'tr-':>6}{'te+':>6}{'te-':>6}  sufficient")
    for f in flags:
        print(f"{f.attribute:<22}{f.train_pos:>6}{f.train_neg:>6}{f.test_pos:>6}{f.test_neg:>6}  {f.sufficient}")
    return sum(f.sufficient for f in flags)


if __name__ == "__main__":
    mismatches = class_table()
    sufficient = sufficiency_table()
    print(f"\nclass mismatches: {mismatches}, unexpectedly sufficient: {sufficient}")
    sys.exit(1 if mismatches or sufficient else 0)
