import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macaudit.data import (
    FALSE,
    TRUE,
    UNDEFINED,
    AttributeMeta,
    EmbeddingSet,
    LabelSet,
    SplitAssignment,
    class_balance_weights,
    join,
    load_attribute_meta,
    load_embeddings,
    load_labels,
    load_split,
    save_attribute_meta,
    save_embeddings,
    save_labels,
    save_split,
    subject_exclusive_split,
)
from macaudit.errors import DegenerateError, ParseError, SplitError
from macaudit.numeric import RngStream

METAS = [AttributeMeta("smile", "Mouth"), AttributeMeta("hat", "Accessories")]


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_two_rows(tmp_path):
    p = write(tmp_path, "e.csv", "sample_id,subject_id,e0,e1,e2,e3\na,s1,1,2,3,4\nb,s2,0.5,-1,1e-3,2\n")
    emb = load_embeddings(p)
    assert (emb.n_samples, emb.n_in) == (2, 4)
    assert emb.sample_ids == ["a", "b"]
    assert emb.vectors[1].tolist() == [0.5, -1.0, 1e-3, 2.0]


def test_ragged_row_reports_line(tmp_path):
    p = write(tmp_path, "e.csv", "sample_id,subject_id,e0,e1,e2,e3\na,s1,1,2,3,4\nb,s2,1,2,3,4,5\n")
    with pytest.raises(ParseError) as exc:
        load_embeddings(p)
    assert exc.value.line == 3
    assert ":3:" in str(exc.value)


def test_header_only_is_no_samples(tmp_path):
    p = write(tmp_path, "e.csv", "sample_id,subject_id,e0\n")
    with pytest.raises(ParseError, match="no samples"):
        load_embeddings(p)


@pytest.mark.parametrize("row", ["a,s1,1,x", "a,s1,1,nan"])
def test_bad_cells(tmp_path, row):
    p = write(tmp_path, "e.csv", f"sample_id,subject_id,e0,e1\n{row}\n")
    with pytest.raises(ParseError):
        load_embeddings(p)


def test_duplicate_sample_id(tmp_path):
    p = write(tmp_path, "e.csv", "sample_id,subject_id,e0\na,s1,1\na,s2,2\n")
    with pytest.raises(ParseError, match="duplicate"):
        load_embeddings(p)


def test_missing_file(tmp_path):
    with pytest.raises(ParseError, match="not found"):
        load_embeddings(tmp_path / "nope.csv")


def test_label_cells(tmp_path):
    p = write(tmp_path, "l.csv", "sample_id,smile,hat\na,1,0\nb,?,1\n")
    labels = load_labels(p, METAS)
    assert labels.values.tolist() == [[TRUE, FALSE], [UNDEFINED, TRUE]]
    assert labels.column("hat").tolist() == [0, 1]
    assert labels.meta("smile").category == "Mouth"


def test_unknown_column_is_named(tmp_path):
    p = write(tmp_path, "l.csv", "sample_id,smile,beard\na,1,0\n")
    with pytest.raises(ParseError, match="beard"):
        load_labels(p, METAS)


def test_illegal_cell(tmp_path):
    p = write(tmp_path, "l.csv", "sample_id,smile\na,2\n")
    with pytest.raises(ParseError, match="illegal"):
        load_labels(p, METAS)


def test_multiclass_cells(tmp_path):
    metas = [AttributeMeta("age", "Demo", 4)]
    p = write(tmp_path, "l.csv", "sample_id,age\na,3\nb,?\n")
    assert load_labels(p, metas).values.ravel().tolist() == [3, UNDEFINED]
    p = write(tmp_path, "l.csv", "sample_id,age\na,4\n")
    with pytest.raises(ParseError):
        load_labels(p, metas)


def test_labels_without_embeddings_are_dropped_at_join(tmp_path, caplog):
    emb = EmbeddingSet(["a", "b"], ["s1", "s2"], np.eye(2))
    labels = LabelSet(["b", "c"], METAS[:1], np.array([[1], [0]], dtype=np.int8))
    with caplog.at_level(logging.INFO):
        ds = join(emb, labels)
    assert ds.sample_ids == ["b"]
    assert ds.y.tolist() == [[1]]
    assert "dropped 2" in caplog.text


def test_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    emb = EmbeddingSet([f"x{i}" for i in range(5)], ["p", "p", "q", "r", "r"], rng.normal(size=(5, 3)))
    save_embeddings(emb, tmp_path / "e.csv")
    back = load_embeddings(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.vectors, emb.vectors)
    assert back.subject_ids == emb.subject_ids

    labels = LabelSet(emb.sample_ids, METAS, rng.integers(-1, 2, size=(5, 2)).astype(np.int8))
    save_attribute_meta(METAS, tmp_path / "m.csv")
    metas = load_attribute_meta(tmp_path / "m.csv")
    assert metas == METAS
    save_labels(labels, tmp_path / "l.csv")
    np.testing.assert_array_equal(load_labels(tmp_path / "l.csv", metas).values, labels.values)

    split = SplitAssignment({"x0", "x1"}, {"x2"})
    save_split(split, tmp_path / "s.csv")
    assert load_split(tmp_path / "s.csv") == split


def test_invariants_enforced():
    with pytest.raises(ValueError):
        EmbeddingSet(["a", "a"], ["s", "s"], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        AttributeMeta("x", n_out=1)
    with pytest.raises(SplitError):
        SplitAssignment({"a"}, {"a"})


def test_split_exact_divisibility():
    emb = EmbeddingSet([f"s{i}" for i in range(10)], [f"p{i}" for i in range(10)], np.zeros((10, 1)))
    split = subject_exclusive_split(emb, 0.7, RngStream(0))
    assert len(split.train_sample_ids) == 7
    assert len(split.test_sample_ids) == 3
    assert not split.train_sample_ids & split.test_sample_ids


def test_split_needs_two_subjects():
    emb = EmbeddingSet(["a", "b"], ["p", "p"], np.zeros((2, 1)))
    with pytest.raises(SplitError):
        subject_exclusive_split(emb, 0.5, RngStream(0))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(1, 6), min_size=2, max_size=30),
    st.floats(0.05, 0.95),
    st.integers(0, 2**32),
)
def test_split_never_shares_subjects(sizes, fraction, seed):
    ids, subjects = [], []
    for s, k in enumerate(sizes):
        for j in range(k):
            ids.append(f"{s}-{j}")
            subjects.append(f"subj{s}")
    emb = EmbeddingSet(ids, subjects, np.zeros((len(ids), 1)))
    split = subject_exclusive_split(emb, fraction, RngStream(seed))
    side = {}
    for sid, subj in zip(ids, subjects):
        where = "train" if sid in split.train_sample_ids else "test"
        assert side.setdefault(subj, where) == where
    assert split.train_sample_ids | split.test_sample_ids == set(ids)
    # greedy fill stops at the first subject that reaches the target
    assert len(split.train_sample_ids) >= fraction * len(ids)
    assert len(split.train_sample_ids) - max(sizes) < fraction * len(ids)
    again = subject_exclusive_split(emb, fraction, RngStream(seed))
    assert again == split


def test_split_ignores_row_order():
    ids = [f"s{i}" for i in range(12)]
    subj = [f"p{i // 3}" for i in range(12)]
    a = subject_exclusive_split(EmbeddingSet(ids, subj, np.zeros((12, 1))), 0.5, RngStream(4))
    b = subject_exclusive_split(EmbeddingSet(ids[::-1], subj[::-1], np.zeros((12, 1))), 0.5, RngStream(4))
    assert a == b


def test_class_weights_examples():
    np.testing.assert_allclose(class_balance_weights([1, 1, 1, 0]), [2.0, 4 / 6], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(class_balance_weights([1] * 5 + [0] * 5), [1.0, 1.0])
    np.testing.assert_array_equal(class_balance_weights([1, -1, 0, -1]), [1.0, 1.0])
    with pytest.raises(DegenerateError):
        class_balance_weights([1, 1, -1])


@given(st.lists(st.sampled_from([-1, 0, 1, 2]), min_size=1, max_size=200))
def test_weighted_count_equals_n(column):
    column = np.array(column)
    defined = column[column >= 0]
    counts = np.bincount(defined, minlength=3)
    if np.any(counts == 0):
        with pytest.raises(DegenerateError):
            class_balance_weights(column, 3)
        return
    w = class_balance_weights(column, 3)
    assert np.sum(counts * w) == pytest.approx(defined.size, rel=1e-12)


def test_dataset_subset_keeps_order():
    emb = EmbeddingSet(["a", "b", "c"], ["p", "q", "r"], np.arange(6.0).reshape(3, 2))
    ds = join(emb, LabelSet(["a", "b", "c"], METAS[:1], np.array([[1], [0], [1]], dtype=np.int8)))
    sub = ds.subset({"c", "a"})
    assert sub.sample_ids == ["a", "c"]
    assert sub.x.tolist() == [[0.0, 1.0], [4.0, 5.0]]
