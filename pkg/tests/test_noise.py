import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latefusion import noise, synth
from latefusion.dataio import AlignedDataset, make_folds
from latefusion.noise import (
    class_thresholds,
    confident_joint,
    cross_val_probabilities,
    find_label_errors,
    n_to_remove,
    prune_dataset,
)
from latefusion.shallow_nn import TrainConfig

HAND_PROBS = np.array([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7]])
HAND_LABELS = np.array([0, 0, 1])


def test_hand_trace():
    t = class_thresholds(HAND_PROBS, HAND_LABELS)
    np.testing.assert_array_equal(t, [(0.9 + 0.2) / 2, 0.7])
    assert t[0] == pytest.approx(0.55, abs=1e-15)
    joint = confident_joint(HAND_PROBS, HAND_LABELS, t)
    assert joint.counts.tolist() == [[1, 1], [0, 1]]
    assert joint.skipped == 0
    report = find_label_errors(HAND_PROBS, HAND_LABELS, ["a", "b", "c"])
    assert [(c.id, c.given_label, c.assigned_label) for c in report.candidates] == [("b", 0, 1)]
    assert report.candidates[0].self_confidence == 0.2


def test_threshold_is_inclusive_and_ties_go_to_smaller_index():
    probs = np.full((4, 2), 0.5)
    joint = confident_joint(probs, [0, 1, 0, 1], class_thresholds(probs, [0, 1, 0, 1]))
    assert joint.assigned.tolist() == [0, 0, 0, 0]
    assert joint.counts.tolist() == [[2, 0], [2, 0]]


def test_empty_candidate_set_is_skipped():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.1, 0.9]])
    joint = confident_joint(probs, [0, 0, 1], np.array([0.95, 0.85]))
    assert joint.skipped == 2
    assert joint.assigned.tolist() == [-1, -1, 1]
    assert joint.counts.tolist() == [[0, 0], [0, 1]]


def test_class_without_samples_is_an_error():
    with pytest.raises(ValueError):
        class_thresholds(HAND_PROBS, [0, 0, 0])


def test_candidate_ranking_breaks_ties_by_id():
    probs = np.array([[0.2, 0.8], [0.2, 0.8], [0.9, 0.1], [0.3, 0.7]])
    report = find_label_errors(probs, [0, 0, 0, 1], ["z", "m", "a", "b"])
    assert [c.id for c in report.candidates] == ["m", "z"]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(5, 40), st.integers(0, 10**6))
def test_added_confident_sample_is_never_a_candidate(c, n, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(c), rng.integers(0, c, n)])
    probs = rng.dirichlet(np.ones(c), labels.size)
    new_label = int(rng.integers(0, c))
    probs2 = np.vstack([probs, np.eye(c)[new_label]])
    labels2 = np.append(labels, new_label)
    ids = [f"x{i:03d}" for i in range(labels2.size)]
    report = find_label_errors(probs2, labels2, ids)
    assert ids[-1] not in {cand.id for cand in report.candidates}


def test_confident_sample_can_still_move_other_samples():
    # raising t_0 from 0.55 to 0.7 pushes sample "0" off the diagonal, so only
    # the added sample itself is guaranteed to stay out of the candidate list
    probs = np.array([[0.6, 0.4], [0.5, 0.5], [0.7, 0.3]])
    labels = np.array([0, 0, 1])
    before = [c.id for c in find_label_errors(probs, labels).candidates]
    after = [c.id for c in find_label_errors(np.vstack([probs, [1.0, 0.0]]), np.append(labels, 0)).candidates]
    assert before == ["2", "1"] and after == ["1", "0"]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(5, 60), st.integers(0, 10**6))
def test_candidate_structure(c, n, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(c), rng.integers(0, c, n)])
    probs = rng.dirichlet(np.ones(c), labels.size)
    report = find_label_errors(probs, labels)
    j = report.joint
    assert j.counts.sum() + j.skipped == labels.size
    assert len(report.candidates) == j.counts.sum() - np.trace(j.counts)
    scores = [(cand.self_confidence, cand.id) for cand in report.candidates]
    assert scores == sorted(scores)


@pytest.mark.parametrize(
    "n, fraction, count, expected",
    [(100, 0.1, None, 10), (7, 0.1, None, 1), (0, 0.1, None, 0), (30, 0.2, None, 6), (10, None, 3, 3), (2, None, 5, 2)],
)
def test_n_to_remove(n, fraction, count, expected):
    assert n_to_remove(n, fraction, count) == expected


def test_prune_removes_top_ranked_and_never_empties_a_class():
    # "a" is the only class-1 sample and ranks first; removing it would empty class 1
    probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.85, 0.15], [0.8, 0.2]])
    labels = np.array([1, 0, 0, 0])
    ds = AlignedDataset(("a", "b", "c", "d"), labels, {"m": probs})
    report = find_label_errors(probs, labels, ds.ids)
    assert [c.id for c in report.candidates] == ["a", "d"]
    result = prune_dataset(ds, report, fraction=0.5)
    assert result.removed_ids == [] and result.skipped_ids == ["a"]
    assert len(result.dataset) == 4


def test_prune_counts():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 300)
    probs = rng.dirichlet(np.ones(3), 300)
    ids = tuple(f"s{i:03d}" for i in range(300))
    ds = AlignedDataset(ids, labels, {"m": probs})
    report = find_label_errors(probs, labels, ids)
    result = prune_dataset(ds, report, fraction=0.1)
    expected = n_to_remove(len(report.candidates), 0.1)
    assert result.removed_ids == [c.id for c in report.candidates[:expected]]
    assert len(result.dataset) == 300 - expected
    assert not set(result.removed_ids) & set(result.dataset.ids)


def _toy(n=400, c=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % c
    centers = rng.normal(scale=4, size=(c, 5))
    return centers[y] + rng.normal(size=(n, 5)), y


def test_oof_rows_ignore_their_own_fold():
    x, y = _toy()
    cfg = TrainConfig(epochs=5)
    base = cross_val_probabilities(x, y, k=2, config=cfg, seed=4)
    folds = make_folds(y, 2, seed=4)
    held = folds.held_out_rows(0)
    for fold in (0, 1):
        net = noise.train_fold_model(x, y, folds, fold, noise.default_base_layout(5, 3), cfg, 4)
        rows = folds.held_out_rows(fold)
        assert net.forward(x[rows]).tobytes() == base[rows].tobytes()
    x2 = x.copy()
    x2[held[0]] += 100.0
    moved = cross_val_probabilities(x2, y, k=2, config=cfg, seed=4)
    np.testing.assert_array_equal(moved[held[1:]], base[held[1:]])


def test_oof_is_accurate_on_separable_toy_and_job_invariant():
    x, y = _toy(seed=1)
    a = cross_val_probabilities(x, y, k=4, seed=0)
    assert (a.argmax(axis=1) == y).mean() >= 0.95
    b = cross_val_probabilities(x, y, k=4, seed=0, jobs=2)
    assert a.tobytes() == b.tobytes()


def test_oof_rejects_small_classes():
    with pytest.raises(ValueError, match="fewer than k"):
        cross_val_probabilities(np.zeros((5, 2)), [0, 0, 0, 0, 1], k=4)


def test_report_export_round_trip(tmp_path):
    report = find_label_errors(HAND_PROBS, HAND_LABELS, ["a", "b", "c"])
    noise.write_noise_report(tmp_path / "r.csv", report)
    assert noise.read_noise_report(tmp_path / "r.csv") == report.candidates
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "rank,id,given_label,assigned_label,self_confidence"


def test_denoise_finds_injected_flips():
    synthetic = synth.generate(synth.separable_preset(n_samples=2000, seed=5))
    result = noise.denoise(synthetic.dataset, seed=5)
    flipped = set(synthetic.flipped_ids)
    cands = [c.id for c in result.report.candidates]
    assert len(set(cands) & flipped) / len(flipped) >= 0.7
    assert set(result.pruned.removed_ids) <= flipped
