import csv
from pathlib import Path

import numpy as np
import pytest

from macaudit.data import save_attribute_meta, save_embeddings, save_labels
from macaudit.model import MacSpec, build_mac
from macaudit.numeric import RngStream
from macaudit.synthetic import PlantedSignal

FIXTURES = Path(__file__).parent / "fixtures"


def read_fixture(name):
    with (FIXTURES / name).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def small_model(seed=0, n_in=5, trunk=(4,), branch=(3,), heads=(("a", 2), ("b", 2)), p_drop=0.5, **kw):
    spec = MacSpec(n_in=n_in, heads=tuple(heads), trunk_sizes=tuple(trunk), branch_sizes=tuple(branch), p_drop=p_drop, **kw)
    return build_mac(spec, RngStream(seed).split("init"))


def write_inputs(root: Path, n_samples=300, n_in=8, seed=1):
    """Small planted-signal corpus on disk, plus score and threshold files for ``clean``."""
    emb, labels, _ = PlantedSignal(n_samples=n_samples, n_in=n_in).generate(seed)
    paths = {
        "embeddings": root / "emb.csv",
        "labels": root / "labels.csv",
        "attributes": root / "attrs.csv",
        "scores": root / "scores.csv",
        "thresholds": root / "thresholds.csv",
        "config": root / "train.cfg",
    }
    save_embeddings(emb, paths["embeddings"])
    save_labels(labels, paths["labels"])
    save_attribute_meta(labels.attributes, paths["attributes"])
    rng = np.random.default_rng(seed)
    with paths["scores"].open("w", encoding="utf-8") as fh:
        fh.write("sample_id," + ",".join(labels.names) + "\n")
        for sid in emb.sample_ids:
            fh.write(sid + "," + ",".join(repr(float(v)) for v in rng.random(len(labels.names))) + "\n")
    paths["thresholds"].write_text("".join(f"{n},0.3,0.6\n" for n in labels.names), encoding="utf-8")
    paths["config"].write_text("epochs=3\nbatch_size=32\ntrunk_sizes=16\nbranch_sizes=8\n", encoding="utf-8")
    return paths


@pytest.fixture
def inputs(tmp_path):
    return write_inputs(tmp_path)


def labels_from_counts(rows):
    """LabelSet plus split realising the given (name, train_pos, train_neg, test_pos, test_neg) counts.

    Each attribute gets its own block of samples; cells outside the block are undefined.
    """
    from macaudit.data import AttributeMeta, LabelSet, SplitAssignment

    blocks = []
    for name, tp, tn, sp, sn in rows:
        blocks.append([("train", 1)] * tp + [("train", 0)] * tn + [("test", 1)] * sp + [("test", 0)] * sn)
    n = sum(len(b) for b in blocks)
    values = np.full((n, len(rows)), -1, dtype=np.int8)
    ids = [f"s{i:06d}" for i in range(n)]
    train, test = set(), set()
    start = 0
    for j, block in enumerate(blocks):
        for i, (side, v) in enumerate(block, start=start):
            values[i, j] = v
            (train if side == "train" else test).add(ids[i])
        start += len(block)
    metas = [AttributeMeta(r[0]) for r in rows]
    return LabelSet(ids, metas, values), SplitAssignment(train, test)


# acceptance verdicts, printed as one line per criterion at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
