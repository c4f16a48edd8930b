"""Multi-task loss, Adam with inverse-time decay, the training loop and structure search."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import UNDEFINED, Dataset, class_balance_weights, subject_exclusive_split
from .errors import ConfigError, DegenerateError, NumericError, ParseError
from .model import ForwardMode, MacModel, MacSpec, build_mac
from .numeric import RngStream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    decay: float | None = None  # None means lr / epochs
    batch_size: int = 1024
    seed: int = 0
    class_weighting: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch-norm needs 2 samples)")
        if self.decay is not None and self.decay < 0:
            raise ConfigError("decay must be non-negative")

    @property
    def beta(self) -> float:
        if self.decay is not None:
            return self.decay
        return self.lr / self.epochs if self.epochs else 0.0


_TRAIN_KEYS = {
    "epochs": int,
    "lr": float,
    "decay": float,
    "batch_size": int,
    "seed": int,
    "class_weighting": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
}


def read_kv(path) -> dict[str, str]:
    """``key=value`` lines (``key: value`` also accepted); ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    out = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ParseError(f"expected key=value, got {raw!r}", path, line_no)
        key, value = (s.strip() for s in line.split(sep, 1))
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path, line_no)
        out[key] = value
    return out


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, value in kv.items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown training config key {key!r}")
        try:
            kwargs[key] = _TRAIN_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return TrainConfig(**kwargs)


# loss -------------------------------------------------------------------------

def multitask_loss(outputs, labels, mask=None, weights=None):
    """Sum over heads of the masked mean cross-entropy.

    ``labels`` is ``n x n_heads`` of class indices (``UNDEFINED`` where unknown).
    ``mask`` defaults to ``labels != UNDEFINED``. ``weights`` optionally maps each
    head to a per-class weight vector. Returns the scalar loss and, per head,
    its gradient with respect to the softmax outputs.
    """
    labels = np.asarray(labels)
    if mask is None:
        mask = labels != UNDEFINED
    total = 0.0
    grads = []
    for k, p in enumerate(outputs):
        g = np.zeros_like(p)
        rows = np.flatnonzero(mask[:, k])
        if rows.size == 0:
            log.debug("head %d: no defined labels in batch", k)
            grads.append(g)
            continue
        cls = labels[rows, k].astype(np.intp)
        w = np.ones(rows.size) if weights is None or weights[k] is None else np.asarray(weights[k])[cls]
        p_true = np.maximum(p[rows, cls], np.finfo(np.float64).tiny)
        total += float(np.sum(-w * np.log(p_true)) / rows.size)
        g[rows, cls] = -w / (p_true * rows.size)
        grads.append(g)
    return total, grads


# optimizer --------------------------------------------------------------------

def lr_schedule(cfg: TrainConfig, t: int) -> float:
    """Inverse-time decay ``lr / (1 + beta * t)``, ``t`` counted in parameter updates."""
    return cfg.lr / (1.0 + cfg.beta * t)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    _tmp: dict = field(default_factory=dict, repr=False, compare=False)

    def scratch(self, name: str, like: np.ndarray) -> np.ndarray:
        buf = self._tmp.get(name)
        if buf is None or buf.shape != like.shape:
            buf = self._tmp[name] = np.empty_like(like, dtype=np.float64)
        return buf

    @classmethod
    def zeros_like(cls, params: dict, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update.

    Parameter arrays and ``state`` are updated in place; the parameter dict is
    returned for convenience.
    """
    for name, g in grads.items():
        # a sum is non-finite whenever any element is, and needs no mask array
        if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        tmp = state.scratch(name, g)
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        theta -= tmp
    return params


# training loop ----------------------------------------------------------------

@dataclass
class History:
    loss: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for i, value in enumerate(self.loss, start=1):
                fh.write(f"{i},{value!r}\n")


def head_class_weights(data: Dataset) -> list:
    out = []
    for k, meta in enumerate(data.attributes):
        try:
            out.append(class_balance_weights(data.y[:, k], meta.n_out))
        except DegenerateError:
            out.append(None)
    return out


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def train(model: MacModel, data: Dataset, cfg: TrainConfig) -> tuple[MacModel, History]:
    """Train ``model`` in place for ``cfg.epochs`` epochs and return it with its loss history."""
    n = len(data)
    if n == 0:
        raise ConfigError("empty training set")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds {n} training samples")
    if [a.name for a in data.attributes] != model.spec.head_names:
        raise ConfigError("dataset attributes do not match model heads")
    root = RngStream(cfg.seed)
    shuffle_rng = root.split("shuffle")
    dropout_rng = root.split("dropout")
    weights = head_class_weights(data) if cfg.class_weighting else None
    state = AdamState.zeros_like(model.params)
    history = History()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            outputs, cache = model.forward(data.x[idx], ForwardMode.TRAIN, dropout_rng)
            loss, upstream = multitask_loss(outputs, data.y[idx], weights=weights)
            grads = model.backward(cache, upstream)
            model.set_params(adam_step(state, model.params, grads, lr_schedule(cfg, state.t)))
            total += loss * idx.size
            seen += idx.size
        history.loss.append(total / seen)
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, history.loss[-1])
    return model, history


# structure search -------------------------------------------------------------

@dataclass
class SearchSpace:
    trunk_depths: tuple = (1, 2, 3)
    branch_depths: tuple = (1, 2, 3)
    layer_sizes: tuple = (128, 256, 512)
    n_candidates: int = 10
    n_repeats: int = 3

    def sample(self, rng: RngStream) -> tuple[tuple, tuple]:
        def draw(depths):
            d = depths[int(rng.integers(0, len(depths)))]
            return tuple(self.layer_sizes[int(rng.integers(0, len(self.layer_sizes)))] for _ in range(d))

        return draw(self.trunk_depths), draw(self.branch_depths)


@dataclass
class SearchRun:
    candidate: int
    repeat: int
    seed: int
    trunk_sizes: tuple
    branch_sizes: tuple
    accuracies: dict  # attribute -> validation balanced accuracy (nan if undefined)

    @property
    def mean_accuracy(self) -> float:
        return float(np.nanmean(list(self.accuracies.values())))


@dataclass
class SearchReport:
    runs: list
    stability: dict  # candidate -> score
    mean_accuracy: dict  # candidate -> mean validation accuracy
    chosen: int

    def to_csv(self, path) -> None:
        attrs = list(self.runs[0].accuracies) if self.runs else []
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(",".join(["candidate", "repeat", "seed", "trunk_sizes", "branch_sizes", "stability", "chosen"] + attrs) + "\n")
            for r in self.runs:
                cells = [
                    str(r.candidate), str(r.repeat), str(r.seed),
                    "-".join(map(str, r.trunk_sizes)), "-".join(map(str, r.branch_sizes)),
                    repr(self.stability[r.candidate]), str(int(r.candidate == self.chosen)),
                ] + ["" if np.isnan(r.accuracies[a]) else repr(r.accuracies[a]) for a in attrs]
                fh.write(",".join(cells) + "\n")


def evaluate_balanced(model: MacModel, data: Dataset) -> dict:
    from .analysis import balanced_accuracy

    outputs = model.predict(data.x)
    accs = {}
    for k, meta in enumerate(data.attributes):
        defined = data.y[:, k] != UNDEFINED
        try:
            accs[meta.name] = balanced_accuracy(
                data.y[defined, k], np.argmax(outputs[k][defined], axis=1), meta.n_out
            )
        except DegenerateError:
            accs[meta.name] = float("nan")
    return accs


def structure_search(space: SearchSpace, data: Dataset, cfg: TrainConfig, base: MacSpec | None = None,
                     validation_fraction: float = 0.2, threads: int = 1) -> tuple[MacSpec, SearchReport]:
    """Pick the candidate whose validation accuracies vary least across seeds.

    The stability score of a candidate is the mean over attributes of the
    across-repeat standard deviation of validation balanced accuracy. Ties go
    to the higher mean accuracy, then the lower candidate index.
    """
    if space.n_candidates < 1 or space.n_repeats < 2:
        raise ConfigError("structure search needs n_candidates >= 1 and n_repeats >= 2")
    root = RngStream(cfg.seed).split("search")
    split = subject_exclusive_split(data, 1.0 - validation_fraction, root.split("validation"))
    fit, val = data.subset(split.train_sample_ids), data.subset(split.test_sample_ids)
    if base is None:
        base = MacSpec(n_in=data.x.shape[1], heads=tuple((a.name, a.n_out) for a in data.attributes))
    draw_rng = root.split("candidates")
    shapes = [space.sample(draw_rng) for _ in range(space.n_candidates)]
    batch_size = min(cfg.batch_size, len(fit))

    def run(job):
        c, r = job
        seed = (cfg.seed + 1 + c * space.n_repeats + r) % 2**64
        spec = replace(base, trunk_sizes=shapes[c][0], branch_sizes=shapes[c][1])
        model = build_mac(spec, RngStream(seed).split("init"))
        train(model, fit, replace(cfg, seed=seed, batch_size=batch_size))
        return SearchRun(c, r, seed, shapes[c][0], shapes[c][1], evaluate_balanced(model, val))

    jobs = [(c, r) for c in range(space.n_candidates) for r in range(space.n_repeats)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(run, jobs))
    else:
        runs = [run(j) for j in jobs]

    stability, mean_acc = {}, {}
    for c in range(space.n_candidates):
        mine = [r for r in runs if r.candidate == c]
        table = np.array([[r.accuracies[a.name] for a in data.attributes] for r in mine])
        stability[c] = float(np.nanmean(np.nanstd(table, axis=0, ddof=1)))
        mean_acc[c] = float(np.nanmean(table))
    chosen = min(range(space.n_candidates), key=lambda c: (stability[c], -mean_acc[c], c))
    spec = replace(base, trunk_sizes=shapes[chosen][0], branch_sizes=shapes[chosen][1])
    return spec, SearchReport(runs, stability, mean_acc, chosen)
