import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calshift.calibration import accuracy, bin_index, brute_force_ece, ece
from calshift.model import ProbBatch
from calshift.numerics import make_rng


def pb(rows, labels):
    return ProbBatch(np.array(rows, float), np.array(labels))


def random_batch(rng, n, k):
    logits = rng.standard_normal((n, k)) * rng.uniform(0.1, 5)
    p = np.exp(logits)
    return ProbBatch(p / p.sum(axis=1, keepdims=True), rng.integers(0, k, n))


def test_perfect_calibration():
    rep = ece(pb(np.eye(3), [0, 1, 2]))
    assert rep.ece == 0.0 and rep.accuracy == 1.0


def test_two_sample_example():
    rows = [[0.9, 0.1], [0.9, 0.1]]
    assert ece(pb(rows, [0, 1])).ece == pytest.approx(0.4, abs=1e-15)


def test_four_sample_example():
    rows = [[0.65, 0.35], [0.65, 0.35], [0.95, 0.05], [0.95, 0.05]]
    labels = [0, 1, 0, 0]
    value = ece(pb(rows, labels), num_bins=10).ece
    assert value == pytest.approx(0.10, abs=1e-15)
    assert brute_force_ece(pb(rows, labels), 10) == pytest.approx(0.10, abs=1e-15)


def test_accuracy_examples():
    assert accuracy(pb(np.eye(2), [0, 1])) == 1.0
    assert accuracy(pb([[0.5, 0.5], [0.5, 0.5]], [0, 0])) == 1.0
    assert accuracy(pb([[0.2, 0.8], [0.9, 0.1]], [0, 0])) == 0.5


def test_empty_batch_rejected():
    empty = ProbBatch(np.empty((0, 2)), np.empty(0, int))
    with pytest.raises(ValueError):
        ece(empty)
    with pytest.raises(ValueError):
        accuracy(empty)


def test_bin_edges_are_right_closed():
    np.testing.assert_array_equal(bin_index([0.0, 0.1, 0.1000001, 1.0], 10), [0, 0, 1, 9])


def test_empty_bins_contribute_nothing():
    rep = ece(pb([[0.9, 0.1], [0.6, 0.4]], [0, 0]), num_bins=100)
    assert sum(b.count for b in rep.bins) == 2
    assert sum(1 for b in rep.bins if b.count) == 2
    assert rep.ece == pytest.approx(0.5 * 0.1 + 0.5 * 0.4)


def test_report_exports(tmp_path):
    rep = ece(pb([[0.9, 0.1], [0.3, 0.7]], [0, 0]), num_bins=5)
    d = json.loads(rep.to_json())
    assert d["ece"] == rep.ece and len(d["bins"]) == 5
    path = tmp_path / "rel.csv"
    rep.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["bin_lower", "bin_upper", "count", "mean_conf", "emp_acc"]
    assert len(rows) == 6


def test_uniform_two_class_model():
    labels = [0, 1] * 5
    rep = ece(pb([[0.5, 0.5]] * 10, labels))
    assert rep.accuracy == 0.5
    assert rep.ece == pytest.approx(abs(rep.accuracy - 0.5))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([1, 10, 15, 100]))
def test_vectorized_matches_brute_force(seed, bins):
    rng = make_rng(seed)
    b = random_batch(rng, int(rng.integers(1, 200)), int(rng.integers(2, 8)))
    assert abs(ece(b, bins).ece - brute_force_ece(b, bins)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_permutation_invariant_and_bounded(seed):
    rng = make_rng(seed)
    b = random_batch(rng, 60, 4)
    perm = rng.permutation(60)
    shuffled = ProbBatch(b.probs[perm], b.labels[perm])
    e1, e2 = ece(b).ece, ece(shuffled).ece
    assert e1 == e2
    assert 0.0 <= e1 <= 1.0
    rep = ece(b)
    assert sum(bn.count for bn in rep.bins) == rep.n == 60
