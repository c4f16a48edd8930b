"""Command-line entry point: ``macaudit {clean,train,audit}``.

Every command stages its outputs in a temporary directory and moves them into
place only after all of them were written, next to a ``manifest.txt`` recording
the command, configuration, seed, tool version and input digests. Without
``--out`` the run directory is ``runs/<command>-<manifest hash>``.

Exit status: 0 success, 2 bad input or configuration, 3 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    DEFAULT_FRACTIONS,
    pearson_matrix,
    rcp_accuracy_table,
    write_correlations,
    write_rcp_table,
    write_summary,
    write_top_correlations,
)
from .data import (
    join,
    load_attribute_meta,
    load_embeddings,
    load_labels,
    load_split,
    save_labels,
    save_split,
    subject_exclusive_split,
)
from .errors import ConfigError, InternalError, UserError
from .labelprep import clean_labels, label_reduction, load_scores, load_thresholds, sufficiency_filter, write_sufficiency
from .model import MacSpec, build_mac, load_model, serialize
from .numeric import RngStream
from .reliability import ReliabilityConfig, mc_passes, predict_with_reliability, write_predictions
from .training import SearchSpace, read_kv, structure_search, train, train_config_from_kv

log = logging.getLogger("macaudit")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 2, 3

_MODEL_KEYS = {
    "trunk_sizes": lambda s: tuple(int(v) for v in s.replace(",", " ").split()),
    "branch_sizes": lambda s: tuple(int(v) for v in s.replace(",", " ").split()),
    "p_drop": float,
    "regularize_heads": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
}
_RELIABILITY_KEYS = {"m": int, "alpha": float, "prediction": str}


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs in a staging directory and publishes them atomically-ish."""

    def __init__(self, command: str, args):
        self.command = command
        self.args = args
        self.entries: list[tuple[str, str]] = [("command", command), ("version", __version__), ("seed", str(args.seed))]
        self.files: dict[str, bytes] = {}

    def record(self, key: str, value) -> None:
        self.entries.append((key, str(value)))

    def record_input(self, role: str, path) -> None:
        self.record(f"input.{role}", path)
        self.record(f"digest.{path}", file_digest(path))

    def manifest(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.entries)

    def publish(self, writers: dict) -> Path:
        """``writers`` maps output file name to a callable taking the target path."""
        manifest = self.manifest()
        if self.args.out:
            out = Path(self.args.out)
        else:
            tag = hashlib.blake2b(manifest.encode(), digest_size=8).hexdigest()
            out = Path("runs") / f"{self.command}-{tag}"
        out.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out.parent))
        try:
            for name, write in writers.items():
                write(stage / name)
            (stage / "manifest.txt").write_text(manifest, encoding="utf-8")
            out.mkdir(parents=True, exist_ok=True)
            for f in sorted(stage.iterdir()):
                os.replace(f, out / f.name)
        finally:
            shutil.rmtree(stage, ignore_errors=True)
        log.info("wrote %s", out)
        return out


def _kv_subset(kv: dict, keys: dict, what: str) -> dict:
    out = {}
    for key, value in kv.items():
        try:
            out[key] = keys[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {what} key {key}: {value!r}") from None
    return out


def _load_joined(args, run: Run):
    metas = load_attribute_meta(args.attributes)
    emb = load_embeddings(args.embeddings)
    labels = load_labels(args.labels, metas)
    for role in ("attributes", "embeddings", "labels"):
        run.record_input(role, getattr(args, role))
    return join(emb, labels)


# commands ---------------------------------------------------------------------

def cmd_clean(args) -> int:
    run = Run("clean", args)
    metas = load_attribute_meta(args.attributes)
    ids, names, scores = load_scores(args.scores)
    thresholds = load_thresholds(args.thresholds)
    labels = clean_labels(ids, names, scores, thresholds, metas)
    run.record_input("attributes", args.attributes)
    run.record_input("scores", args.scores)
    run.record_input("thresholds", args.thresholds)
    if args.split:
        split = load_split(args.split)
        run.record_input("split", args.split)
    elif args.embeddings:
        emb = load_embeddings(args.embeddings)
        run.record_input("embeddings", args.embeddings)
        run.record("train_fraction", args.train_fraction)
        split = subject_exclusive_split(emb, args.train_fraction, RngStream(args.seed).split("split"))
    else:
        raise ConfigError("clean needs --split or --embeddings to count samples per split")
    run.record("min_count", args.min_count)
    flags = sufficiency_filter(labels, split, args.min_count)
    reduction = label_reduction(labels)
    print(f"undefined label cells: {reduction['cells']:.1%}")
    print(f"samples with an undefined label: {reduction['samples']:.1%}")
    for f in flags:
        if not f.sufficient:
            print(f"insufficient: {f.attribute} ({f.train_pos}/{f.train_neg} train, {f.test_pos}/{f.test_neg} test)")
    run.publish({
        "labels.csv": lambda p: save_labels(labels, p),
        "sufficiency.csv": lambda p: write_sufficiency(flags, p),
    })
    return EXIT_OK


def cmd_train(args) -> int:
    run = Run("train", args)
    kv = read_kv(args.config) if args.config else {}
    if args.config:
        run.record_input("config", args.config)
    unknown = set(kv) - set(_MODEL_KEYS) - {"epochs", "lr", "decay", "batch_size", "seed", "class_weighting"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    model_kw = _kv_subset({k: v for k, v in kv.items() if k in _MODEL_KEYS}, _MODEL_KEYS, "model")
    cfg = train_config_from_kv({k: v for k, v in kv.items() if k not in _MODEL_KEYS})
    cfg = replace(cfg, seed=args.seed)
    for key in ("epochs", "lr", "decay", "batch_size", "class_weighting"):
        run.record(f"config.{key}", getattr(cfg, key))
    for key, value in sorted(model_kw.items()):
        run.record(f"config.{key}", value)

    data = _load_joined(args, run)
    run.record("train_fraction", args.train_fraction)
    split = subject_exclusive_split(data, args.train_fraction, RngStream(cfg.seed).split("split"))
    train_set = data.subset(split.train_sample_ids)
    spec = MacSpec(n_in=data.x.shape[1], heads=tuple((a.name, a.n_out) for a in data.attributes), **model_kw)
    writers = {}
    if args.search:
        space = SearchSpace(n_candidates=args.candidates, n_repeats=args.repeats)
        run.record("search.candidates", args.candidates)
        run.record("search.repeats", args.repeats)
        spec, report = structure_search(space, train_set, cfg, base=spec, threads=args.threads)
        writers["search.csv"] = report.to_csv
    model = build_mac(spec, RngStream(cfg.seed).split("init"))
    model, history = train(model, train_set, cfg)
    blob = serialize(model)
    writers.update({
        "model.macb": lambda p: p.write_bytes(blob),
        "history.csv": history.to_csv,
        "split.csv": lambda p: save_split(split, p),
    })
    run.publish(writers)
    return EXIT_OK


def _parse_fractions(text: str) -> tuple:
    try:
        fractions = tuple(float(f) for f in text.split(",") if f.strip())
    except ValueError:
        raise ConfigError(f"bad --fractions {text!r}") from None
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {text!r}")
    return fractions


def cmd_audit(args) -> int:
    run = Run("audit", args)
    fractions = _parse_fractions(args.fractions)
    kv = read_kv(args.config) if args.config else {}
    if args.config:
        run.record_input("config", args.config)
    unknown = set(kv) - set(_RELIABILITY_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    rel_cfg = ReliabilityConfig(**_kv_subset(kv, _RELIABILITY_KEYS, "reliability"))
    if args.passes is not None:
        rel_cfg = replace(rel_cfg, m=args.passes)
    if args.alpha is not None:
        rel_cfg = replace(rel_cfg, alpha=args.alpha)
    for key in ("m", "alpha", "prediction"):
        run.record(f"config.{key}", getattr(rel_cfg, key))
    run.record("fractions", ",".join(repr(f) for f in fractions))

    model = load_model(args.model)
    run.record_input("model", args.model)
    data = _load_joined(args, run)
    split = load_split(args.split)
    run.record_input("split", args.split)
    if data.x.shape[1] != model.spec.n_in:
        raise ConfigError(f"embeddings have {data.x.shape[1]} dims, model expects {model.spec.n_in}")
    if [a.name for a in data.attributes] != model.spec.head_names:
        raise ConfigError("label columns do not match the model heads")
    test = data.subset(split.test_sample_ids)
    if len(test) == 0:
        raise ConfigError("test split is empty")

    passes = mc_passes(model, test.x, rel_cfg, RngStream(args.seed).split("mc"), threads=args.threads)
    deterministic = model.predict(test.x) if rel_cfg.prediction == "deterministic" else None
    names = model.spec.head_names
    records = predict_with_reliability(passes, rel_cfg, test.sample_ids, names, deterministic)
    # only score samples whose label for that attribute is defined
    col = {n: k for k, n in enumerate(names)}
    row = {s: i for i, s in enumerate(test.sample_ids)}
    scored = [r for r in records if test.y[row[r.sample_id], col[r.attribute]] >= 0]
    table = rcp_accuracy_table(scored, test.labels(), fractions)
    corr = pearson_matrix(data.labels())
    writers = {
        "predictions.csv": lambda p: write_predictions(records, p),
        "rcp_table.csv": lambda p: write_rcp_table(table, fractions, p),
        "correlations.csv": lambda p: write_correlations(corr, p),
    }
    n_pairs = int(np.sum(~np.isnan(corr.values[np.triu_indices(len(names), 1)])))
    if n_pairs:
        writers["top_correlations.csv"] = lambda p: write_top_correlations(corr, min(args.top_k, n_pairs), p)
    if 1.0 in fractions and 0.5 in fractions:
        writers["summary.csv"] = lambda p: write_summary(table, p)
    run.publish(writers)
    return EXIT_OK


# argument parsing -------------------------------------------------------------

def _global_flags(parser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(0), help="root random seed (default 0)")
    parser.add_argument("--out", default=default(None), help="output directory (default runs/<command>-<hash>)")
    parser.add_argument("--threads", type=int, default=default(1), help="worker threads for independent runs and passes")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macaudit", description=__doc__.split("\n")[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="binarize continuous attribute scores and check class support")
    _global_flags(p, suppress=True)
    p.add_argument("--attributes", required=True, help="attribute metadata file (name,category,n_out)")
    p.add_argument("--scores", required=True, help="continuous score CSV")
    p.add_argument("--thresholds", required=True, help="threshold file (attribute,lower,upper)")
    p.add_argument("--split", help="split CSV (sample_id,side)")
    p.add_argument("--embeddings", help="embedding CSV, used to draw a subject-exclusive split")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--min-count", type=int, default=100)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("train", help="train the attribute classifier")
    _global_flags(p, suppress=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--config", help="key=value training config")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--search", action="store_true", help="run the random structure search first")
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="MC-dropout predictions, reliability-filtered accuracies and label correlations")
    _global_flags(p, suppress=True)
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS))
    p.add_argument("--config", help="key=value reliability config (m, alpha, prediction)")
    p.add_argument("--passes", type=int, help="number of stochastic passes (overrides config)")
    p.add_argument("--alpha", type=float, help="dispersion weight of the reliability score (overrides config)")
    p.add_argument("--top-k", type=int, default=15)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
