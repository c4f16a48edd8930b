"""Monte-Carlo dropout inference and the centrality-minus-dispersion reliability score."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .model import ForwardMode, MacModel
from .numeric import RngStream


@dataclass(frozen=True)
class ReliabilityConfig:
    m: int = 100
    alpha: float = 0.5
    # "mean": predicted class from the mean of the stochastic passes;
    # "deterministic": from a dropout-free forward pass.
    prediction: str = "mean"

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be positive, got {self.m}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.prediction not in ("mean", "deterministic"):
            raise ConfigError(f"unknown prediction rule {self.prediction!r}")


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    attribute: str
    predicted_class: int
    reliability: float
    passes: tuple = ()


def mc_passes(model: MacModel, batch, cfg: ReliabilityConfig, rng: RngStream, threads: int = 1) -> list[np.ndarray]:
    """Per head, an ``m x n x n_out`` stack of softmax outputs under random dropout masks.

    Pass ``i`` draws its masks from ``rng.split(f"pass-{i}")`` so the result is
    independent of ``threads``.
    """
    if cfg.m < 1:
        raise ConfigError("m must be positive")
    batch = np.asarray(batch, dtype=np.float64)

    def one(i):
        return model.forward(batch, ForwardMode.MC_DROPOUT, rng.split(f"pass-{i}"))[0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            passes = list(pool.map(one, range(cfg.m)))
    else:
        passes = [one(i) for i in range(cfg.m)]
    return [np.stack([p[k] for p in passes]) for k in range(len(model.spec.heads))]


def reliability_score(x, alpha: float = 0.5) -> float:
    """``(1-a)/m * sum(x) - a/m^2 * sum_ij |x_i - x_j|``.

    The double sum is evaluated in ``O(m log m)`` from the sorted values:
    ``sum_ij |x_i - x_j| = 2 * sum_k (2k - m + 1) x_(k)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise RangeError("reliability needs a non-empty 1-D sequence")
    return float(reliability_scores(x[None, :], alpha)[0])


def reliability_scores(x, alpha: float = 0.5) -> np.ndarray:
    """Row-wise :func:`reliability_score` for an ``n x m`` array."""
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[-1]
    if m == 0:
        raise RangeError("reliability needs at least one pass")
    xs = np.sort(x, axis=-1)
    coef = 2.0 * np.arange(m) - m + 1.0
    pair_sum = 2.0 * (xs * coef).sum(axis=-1)
    return (1.0 - alpha) / m * x.sum(axis=-1) - alpha / (m * m) * pair_sum


def predict_with_reliability(passes: Sequence[np.ndarray], cfg: ReliabilityConfig, sample_ids: Sequence[str],
                             attributes: Sequence[str], deterministic: Sequence[np.ndarray] | None = None,
                             keep_passes: bool = False) -> list[PredictionRecord]:
    """Predicted class and reliability for every sample and attribute.

    ``passes[k]`` is head ``k``'s ``m x n x n_out`` stack from :func:`mc_passes`.
    """
    if len(passes) != len(attributes):
        raise ShapeError(f"{len(passes)} pass stacks for {len(attributes)} attributes")
    records = []
    for k, (stack, name) in enumerate(zip(passes, attributes)):
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim != 3 or stack.shape[1] != len(sample_ids):
            raise ShapeError(f"{name}: pass stack shape {stack.shape} does not match {len(sample_ids)} samples")
        if cfg.prediction == "deterministic":
            if deterministic is None:
                raise ConfigError("deterministic prediction rule needs the dropout-free outputs")
            chosen = np.argmax(deterministic[k], axis=1)
        else:
            chosen = np.argmax(stack.mean(axis=0), axis=1)
        x = stack[:, np.arange(stack.shape[1]), chosen].T  # n x m
        rel = reliability_scores(x, cfg.alpha)
        for i, sid in enumerate(sample_ids):
            records.append(PredictionRecord(
                sid, name, int(chosen[i]), float(rel[i]), tuple(x[i].tolist()) if keep_passes else ()
            ))
    return records


def rcp_filter(records: Sequence[PredictionRecord], fraction: float) -> list[PredictionRecord]:
    """Keep the ``ceil(fraction * n)`` most reliable records; ties by sample_id."""
    if not records:
        raise RangeError("rcp_filter needs at least one record")
    if not 0.0 < fraction <= 1.0:
        raise RangeError(f"fraction must be in (0, 1], got {fraction}")
    n_keep = math.ceil(round(fraction * len(records), 9))
    ranked = sorted(records, key=lambda r: (-r.reliability, r.sample_id))
    return ranked[:n_keep]


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "attribute", "predicted_class", "reliability"])
        for r in records:
            w.writerow([r.sample_id, r.attribute, r.predicted_class, repr(r.reliability)])


def read_predictions(path) -> list[PredictionRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            PredictionRecord(row["sample_id"], row["attribute"], int(row["predicted_class"]), float(row["reliability"]))
            for row in reader
        ]
