import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latefusion.metrics import accuracy, confusion, evaluation_report, macro_f1, macro_f1_from_confusion


def brute_force_macro_f1(preds, labels, n_classes):
    """Per-class counting straight from the precision/recall definitions."""
    total = 0.0
    for c in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return total / n_classes


def test_confusion_examples():
    assert confusion([0, 1], [0, 1], 2).tolist() == [[1, 0], [0, 1]]
    assert confusion([1, 0], [0, 1], 2).tolist() == [[0, 1], [1, 0]]
    assert confusion([0, 1, 1, 1], [0, 0, 1, 1], 2).tolist() == [[1, 1], [0, 2]]


def test_confusion_errors():
    with pytest.raises(ValueError, match="length"):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError, match="range"):
        confusion([0, 2], [0, 1], 2)


def test_macro_f1_examples():
    expected = brute_force_macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert expected == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-15)
    assert macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(0.733333333333, abs=1e-9)
    assert macro_f1([0, 0], [0, 1], 2) == pytest.approx(1 / 3, abs=1e-12)
    for c in (2, 5, 27):
        labels = np.arange(3 * c) % c
        assert macro_f1(labels, labels, c) == 1.0


def test_absent_class_counts_as_zero():
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([1, 1], [0, 0]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([0], [0, 1])


def test_report_has_six_decimals():
    r = evaluation_report([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert r["macro_f1"] == 0.733333
    assert r["confusion"] == [[1, 1], [0, 2]]


pairs = st.integers(2, 6).flatmap(
    lambda c: st.tuples(
        st.just(c),
        st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=60),
    )
)


@settings(max_examples=200)
@given(pairs, st.randoms(use_true_random=False))
def test_macro_f1_properties(case, rnd):
    c, rows = case
    preds = [p for p, _ in rows]
    labels = [y for _, y in rows]
    score = macro_f1(preds, labels, c)
    assert score == pytest.approx(brute_force_macro_f1(preds, labels, c), abs=1e-12)
    assert 0.0 <= score <= 1.0
    assert score == macro_f1_from_confusion(confusion(preds, labels, c))

    order = list(range(len(rows)))
    rnd.shuffle(order)
    assert macro_f1([preds[i] for i in order], [labels[i] for i in order], c) == pytest.approx(score, abs=1e-12)

    relabel = list(range(c))
    rnd.shuffle(relabel)
    assert macro_f1([relabel[p] for p in preds], [relabel[y] for y in labels], c) == pytest.approx(score, abs=1e-12)
