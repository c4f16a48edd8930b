"""Planted-signal data with known answers, used for end-to-end checks.

Each signal attribute owns one random unit direction in embedding space. The
coordinate of a sample along that direction is replaced by a planted value
whose sign encodes the label:

``linear``
    ``label * (margin + |N(0, 1)|)``: separable with a wide gap.
``ambiguous``
    half the samples as ``linear``; the other half at
    ``label * hard_offset + N(0, hard_noise)``, close to the boundary and often
    on the wrong side of it.
``noise``
    labels are fair coin flips independent of the embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AttributeMeta, Dataset, EmbeddingSet, LabelSet
from .numeric import RngStream

DEFAULT_KINDS = ("linear", "linear", "ambiguous", "ambiguous", "noise", "noise")


@dataclass
class PlantedSignal:
    n_samples: int = 10_000
    n_in: int = 64
    kinds: tuple = DEFAULT_KINDS
    samples_per_subject: int = 5
    margin: float = 1.0
    hard_offset: float = 0.25
    hard_noise: float = 0.5

    def generate(self, seed: int) -> tuple[EmbeddingSet, LabelSet, np.ndarray]:
        """Embeddings, labels and a boolean ``n x n_attributes`` mask marking the hard half."""
        rng = RngStream(seed).split("planted")
        n, d = self.n_samples, self.n_in
        signal = [k for k in self.kinds if k != "noise"]
        if len(signal) > d:
            raise ValueError("more signal attributes than embedding dimensions")
        basis, _ = np.linalg.qr(rng.split("basis").normal(size=(d, d)))
        x = rng.split("features").normal(size=(n, d))
        y = np.zeros((n, len(self.kinds)), dtype=np.int8)
        hard = np.zeros((n, len(self.kinds)), dtype=bool)
        direction = 0
        for a, kind in enumerate(self.kinds):
            r = rng.split(f"attr-{a}")
            labels = (r.random(n) < 0.5).astype(np.int8)
            y[:, a] = labels
            if kind == "noise":
                continue
            sign = 2.0 * labels - 1.0
            value = sign * (self.margin + np.abs(r.normal(size=n)))
            if kind == "ambiguous":
                hard[:, a] = r.random(n) < 0.5
                near = sign * self.hard_offset + r.normal(0.0, self.hard_noise, size=n)
                value = np.where(hard[:, a], near, value)
            elif kind != "linear":
                raise ValueError(f"unknown attribute kind {kind!r}")
            u = basis[:, direction]
            direction += 1
            x += np.outer(value - x @ u, u)
        sample_ids = [f"s{i:06d}" for i in range(n)]
        subject_ids = [f"p{i // self.samples_per_subject:05d}" for i in range(n)]
        metas = [AttributeMeta(f"{kind}_{a}", kind, 2) for a, kind in enumerate(self.kinds)]
        return EmbeddingSet(sample_ids, subject_ids, x), LabelSet(list(sample_ids), metas, y), hard

    def dataset(self, seed: int) -> Dataset:
        emb, labels, _ = self.generate(seed)
        return Dataset(emb.sample_ids, emb.subject_ids, emb.vectors, labels.values, labels.attributes)
