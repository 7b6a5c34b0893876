import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latefusion import dataio
from latefusion.dataio import (
    AlignedDataset,
    DataError,
    FeatureMatrix,
    ProbabilityMatrix,
    SplitSpec,
    align_modalities,
    clean_text,
    make_folds,
    split_train_val,
)


# -- clean_text -------------------------------------------------------------


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("<p>Bonjour</p>", "Bonjour"),
        ("a   b", "a b"),
        ("L&#39;été", "L'été"),
        ("L&#39été", "L'été"),
        ("  <p>Jeu de <b>société</b></p>\n\t", "Jeu de société"),
        ("&#x41;BC", "ABC"),
        ("5 < 6 and 7 > 3", "5 < 6 and 7 > 3"),
        ("broken <p tag", "broken <p tag"),
        ("&#0; stays", "&#0; stays"),
        ("&#xD800; stays", "&#xD800; stays"),
        ("", ""),
    ],
)
def test_clean_text_examples(raw, expected):
    assert clean_text(raw) == expected


def test_clean_text_apostrophe_matches_reference_table():
    import html.entities

    assert chr(39) == "'" == html.entities.html5["apos;"]


def test_clean_text_encoded_tag_is_removed_in_a_later_pass():
    assert clean_text("x&#60;p&#62;y") == "x y"


@settings(max_examples=300)
@given(st.text(alphabet=st.sampled_from(list("ab <>/p&#;3x9 \n\tL'é")), max_size=40))
def test_clean_text_idempotent(s):
    once = clean_text(s)
    assert clean_text(once) == once


# -- probability matrices and CSV -------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_simple_matrix(tmp_path):
    p = _write(tmp_path / "p.csv", "id,p0,p1\ns1,0.5,0.5\n")
    m = dataio.load_probability_matrix(p, 2)
    assert m.ids == ("s1",)
    np.testing.assert_array_equal(m.values, [[0.5, 0.5]])


def test_load_renormalizes_small_deviation(tmp_path, caplog):
    p = _write(tmp_path / "p.csv", "id,p0,p1\ns1,0.5,0.4999\ns2,0.25,0.75\n")
    with caplog.at_level("WARNING"):
        m = dataio.load_probability_matrix(p, 2)
    assert "renormalized 1 row" in caplog.text
    np.testing.assert_allclose(m.values[0], [0.5 / 0.9999, 0.4999 / 0.9999], rtol=0, atol=1e-15)
    assert abs(m.values[0].sum() - 1) < 1e-12
    np.testing.assert_array_equal(m.values[1], [0.25, 0.75])


def test_load_keeps_rows_within_strict_tolerance(tmp_path):
    p = _write(tmp_path / "p.csv", "id,p0,p1\ns1,0.5,0.4999995\n")
    m = dataio.load_probability_matrix(p, 2)
    np.testing.assert_array_equal(m.values, [[0.5, 0.4999995]])


def test_load_rejects_large_deviation(tmp_path):
    p = _write(tmp_path / "p.csv", "id,p0,p1\ns1,0.5,0.6\n")
    with pytest.raises(DataError, match="sums to"):
        dataio.load_probability_matrix(p, 2)


def test_load_rejects_dimension_mismatch(tmp_path):
    p = _write(tmp_path / "p.csv", "id,p0,p1\ns1,0.5,0.5\n")
    with pytest.raises(DataError, match="expected 3"):
        dataio.load_probability_matrix(p, 3)


def test_load_rejects_bad_header_and_ragged_rows(tmp_path):
    with pytest.raises(DataError, match="header"):
        dataio.load_probability_matrix(_write(tmp_path / "a.csv", "id,q0,q1\ns1,0.5,0.5\n"), 2)
    with pytest.raises(DataError, match="fields"):
        dataio.load_probability_matrix(_write(tmp_path / "b.csv", "id,p0,p1\ns1,0.5\n"), 2)


def test_load_rejects_negative_entries(tmp_path):
    with pytest.raises(DataError):
        dataio.load_probability_matrix(_write(tmp_path / "a.csv", "id,p0,p1\ns1,-0.5,1.5\n"), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_probability_csv_round_trip_is_bit_exact(tmp_path_factory, n, c, seed):
    rng = np.random.default_rng(seed)
    values = rng.dirichlet(np.full(c, 0.3), size=n)
    ids = tuple(f"id{i}" for i in range(n))
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    dataio.save_probability_matrix(path, ProbabilityMatrix(ids, values))
    back = dataio.load_probability_matrix(path, c)
    assert back.ids == ids
    assert back.values.tobytes() == values.tobytes()


def test_feature_and_label_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = FeatureMatrix(("a", "b"), rng.normal(size=(2, 3)))
    dataio.save_feature_matrix(tmp_path / "f.csv", f)
    assert dataio.load_feature_matrix(tmp_path / "f.csv").values.tobytes() == f.values.tobytes()
    dataio.save_labels(tmp_path / "l.csv", ["a", "b"], [1, 0])
    assert dataio.load_labels(tmp_path / "l.csv") == {"a": 1, "b": 0}


# -- alignment ---------------------------------------------------------------


def test_align_reorders_to_sorted_ids():
    text = ProbabilityMatrix(("a", "b"), [[1.0, 0.0], [0.0, 1.0]])
    image = ProbabilityMatrix(("b", "a"), [[0.0, 1.0], [1.0, 0.0]])
    ds = align_modalities({"text": text, "image": image}, labels={"b": 1, "a": 0})
    assert ds.ids == ("a", "b")
    np.testing.assert_array_equal(ds.probabilities["text"], ds.probabilities["image"])
    np.testing.assert_array_equal(ds.labels, [0, 1])
    assert ds.modality_names == ["image", "text"]


def test_align_missing_id_is_an_error():
    text = ProbabilityMatrix(("a", "b"), [[1.0, 0.0], [0.0, 1.0]])
    image = ProbabilityMatrix(("a",), [[1.0, 0.0]])
    with pytest.raises(DataError, match="'b'"):
        align_modalities({"text": text, "image": image})


def test_align_duplicate_id_is_an_error():
    text = ProbabilityMatrix(("a", "a"), [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DataError, match="duplicate"):
        align_modalities({"text": text})


def test_align_single_modality_and_idempotence():
    text = ProbabilityMatrix(("z", "y", "x"), np.eye(3))
    ds = align_modalities({"text": text})
    assert list(ds.probabilities) == ["text"]
    again = align_modalities({"text": ProbabilityMatrix(ds.ids, ds.probabilities["text"])})
    assert again.ids == ds.ids
    np.testing.assert_array_equal(again.probabilities["text"], ds.probabilities["text"])


def test_dataset_is_immutable():
    ds = AlignedDataset(("a",), np.array([0]), {"m": np.array([[1.0, 0.0]])})
    with pytest.raises(ValueError):
        ds.probabilities["m"][0, 0] = 0.5


# -- splits and folds --------------------------------------------------------


def _dataset(n, c=3, seed=0):
    rng = np.random.default_rng(seed)
    ids = tuple(f"s{i:05d}" for i in range(n))
    return AlignedDataset(ids, rng.integers(0, c, n), {"m": rng.dirichlet(np.ones(c), n)})


@pytest.mark.parametrize("n, expected", [(84916, (76424, 8492)), (10, (9, 1))])
def test_split_sizes(n, expected):
    assert (SplitSpec(0.9).train_size(n), n - SplitSpec(0.9).train_size(n)) == expected
    assert math.floor(0.9 * n) == expected[0]
    if n <= 10000:
        tr, va = split_train_val(_dataset(n), SplitSpec(0.9, seed=3))
        assert (len(tr), len(va)) == expected


def test_split_is_disjoint_exhaustive_and_deterministic():
    ds = _dataset(500)
    a_tr, a_va = split_train_val(ds, SplitSpec(0.9, seed=7))
    b_tr, b_va = split_train_val(ds, SplitSpec(0.9, seed=7))
    assert a_tr.ids == b_tr.ids and a_va.ids == b_va.ids
    assert set(a_tr.ids).isdisjoint(a_va.ids)
    assert set(a_tr.ids) | set(a_va.ids) == set(ds.ids)
    c_tr, _ = split_train_val(ds, SplitSpec(0.9, seed=8))
    assert c_tr.ids != a_tr.ids


def test_split_needs_two_samples():
    with pytest.raises(ValueError):
        split_train_val(_dataset(1), SplitSpec())


def test_fold_examples():
    assert make_folds(np.zeros(8, int), 4, seed=0).fold_sizes().tolist() == [2, 2, 2, 2]
    f = make_folds([0, 0, 0, 0, 1, 1, 1, 1], 4, seed=5, stratified=True)
    for k in range(4):
        assert sorted(np.array([0, 0, 0, 0, 1, 1, 1, 1])[f.held_out_rows(k)].tolist()) == [0, 1]
    assert sorted(make_folds(np.zeros(10, int), 4, seed=1).fold_sizes().tolist()) == [2, 2, 3, 3]


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds([0, 1, 0], 4)
    with pytest.raises(ValueError):
        make_folds([0, 1, 0], 1)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=2, max_size=200),
    st.integers(2, 10),
    st.integers(0, 10**6),
    st.booleans(),
)
def test_fold_invariants(labels, k, seed, stratified):
    labels = np.array(labels)
    if k > labels.size:
        return
    f = make_folds(labels, k, seed, stratified)
    sizes = f.fold_sizes()
    assert sizes.max() - sizes.min() <= 1
    if stratified:
        for c in np.unique(labels):
            per = np.bincount(f.assignment[labels == c], minlength=k)
            assert per.max() - per.min() <= 1
    again = make_folds(labels, k, seed, stratified)
    assert again.assignment.tobytes() == f.assignment.tobytes()
