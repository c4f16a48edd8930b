"""End-to-end planted-signal benchmark driven through the command-line interface.

Writes a synthetic corpus, runs ``train`` and ``audit`` on it and checks each
attribute against the behaviour its planted signal implies.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import PredictabilityClass
from .data import save_attribute_meta, save_embeddings, save_labels
from .synthetic import PlantedSignal

LINEAR_MIN_ACC = 0.92
NOISE_MAX_ACC = 0.60
FILTER_SLACK = 0.005
AMBIGUOUS_MIN_GAIN = 0.03


@dataclass
class AttributeCheck:
    attribute: str
    kind: str
    acc100: float
    acc50: float
    klass: str
    passed: bool


@dataclass
class BenchmarkRun:
    seed: int
    checks: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def n_passed(self) -> int:
        return sum(c.passed for c in self.checks)


def check_attribute(kind: str, acc100: float, acc50: float, klass: str) -> bool:
    if kind == "linear":
        return acc100 >= LINEAR_MIN_ACC and klass == PredictabilityClass.EASILY.value and acc50 >= acc100 - FILTER_SLACK
    if kind == "ambiguous":
        return acc50 >= acc100 - FILTER_SLACK and acc50 - acc100 >= AMBIGUOUS_MIN_GAIN
    if kind == "noise":
        return acc100 <= NOISE_MAX_ACC and klass == PredictabilityClass.HARDLY.value
    raise ValueError(f"unknown attribute kind {kind!r}")


def run_planted(seed: int, workdir, epochs: int = 50, batch_size: int = 256, passes: int = 100,
                signal: PlantedSignal | None = None) -> BenchmarkRun:
    from .cli import main

    signal = signal or PlantedSignal()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    emb, labels, _ = signal.generate(seed)
    save_embeddings(emb, work / "embeddings.csv")
    save_labels(labels, work / "labels.csv")
    save_attribute_meta(labels.attributes, work / "attributes.csv")
    (work / "train.cfg").write_text(f"epochs={epochs}\nbatch_size={batch_size}\n", encoding="utf-8")
    common = ["--embeddings", str(work / "embeddings.csv"), "--labels", str(work / "labels.csv"),
              "--attributes", str(work / "attributes.csv")]
    status = main(["--seed", str(seed), "--out", str(work / "train"), "train", *common,
                   "--config", str(work / "train.cfg")])
    if status != 0:
        raise RuntimeError(f"train exited with {status}")
    status = main(["--seed", str(seed), "--out", str(work / "audit"), "audit", *common,
                   "--model", str(work / "train" / "model.macb"), "--split", str(work / "train" / "split.csv"),
                   "--passes", str(passes)])
    if status != 0:
        raise RuntimeError(f"audit exited with {status}")
    run = BenchmarkRun(seed, seconds=time.perf_counter() - start)
    with (work / "audit" / "rcp_table.csv").open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            a100, a50 = float(row["acc_rcp100"]), float(row["acc_rcp50"])
            ok = check_attribute(row["category"], a100, a50, row["class"])
            run.checks.append(AttributeCheck(row["attribute"], row["category"], a100, a50, row["class"], ok))
    return run
