import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slidegraph.metrics import (
    accuracy,
    confusion,
    isup_grade,
    kappa_weights,
    quadratic_weighted_kappa,
    format_metrics_block,
    parse_metrics_report,
)
from slidegraph.validation import ContractError


def kappa_oracle(actual, predicted, n, weight_power=1):
    """Direct-formula reference: plain-Python histograms and loops.

    ``weight_power`` selects the (N-1) or (N-1)^2 weight denominator; the
    score must not depend on it.
    """
    total = len(actual)
    counts = {}
    for a, p in zip(actual, predicted):
        counts[(a, p)] = counts.get((a, p), 0) + 1
    actual_hist = [0] * n
    predicted_hist = [0] * n
    for a in actual:
        actual_hist[a] += 1
    for p in predicted:
        predicted_hist[p] += 1
    num = 0.0
    den = 0.0
    for i in range(n):
        for j in range(n):
            w = (i - j) ** 2 / float((n - 1) ** weight_power)
            num += w * counts.get((i, j), 0)
            den += w * actual_hist[i] * predicted_hist[j] / total
    if den == 0.0:
        return 1.0
    return 1.0 - num / den


def test_kappa_perfect_agreement_is_exactly_one():
    labels = [0, 1, 2, 3, 4, 5, 2, 2, 1]
    assert quadratic_weighted_kappa(labels, labels, 6) == 1.0


def test_kappa_total_disagreement_two_classes():
    assert quadratic_weighted_kappa([0, 0, 1, 1], [1, 1, 0, 0], 2) == -1.0


def test_kappa_constant_equal_labels_convention():
    assert quadratic_weighted_kappa([2, 2, 2], [2, 2, 2], 6) == 1.0


def test_kappa_constant_but_wrong_is_zero():
    assert quadratic_weighted_kappa([0, 0, 0], [1, 1, 1], 3) == pytest.approx(0.0)


def test_kappa_matches_independent_oracle_on_random_pairs():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        length = int(rng.integers(1, 101))
        actual = rng.integers(0, 6, size=length).tolist()
        predicted = rng.integers(0, 6, size=length).tolist()
        ours = quadratic_weighted_kappa(actual, predicted, 6)
        ref = kappa_oracle(actual, predicted, 6)
        assert abs(ours - ref) < 1e-12


def test_kappa_invariant_to_weight_scale():
    rng = np.random.default_rng(5)
    for _ in range(50):
        actual = rng.integers(0, 6, size=60).tolist()
        predicted = rng.integers(0, 6, size=60).tolist()
        a = kappa_oracle(actual, predicted, 6, weight_power=1)
        b = kappa_oracle(actual, predicted, 6, weight_power=2)
        assert abs(a - b) < 1e-12
        assert abs(quadratic_weighted_kappa(actual, predicted, 6) - b) < 1e-12


def test_kappa_symmetric_under_argument_swap_and_reversal():
    rng = np.random.default_rng(6)
    actual = rng.integers(0, 6, size=80).tolist()
    predicted = rng.integers(0, 6, size=80).tolist()
    base = quadratic_weighted_kappa(actual, predicted, 6)
    swapped = quadratic_weighted_kappa(predicted, actual, 6)
    reversed_ = quadratic_weighted_kappa(
        [5 - a for a in actual], [5 - p for p in predicted], 6
    )
    assert abs(base - swapped) < 1e-12
    assert abs(base - reversed_) < 1e-12


def test_kappa_shuffled_predictions_center_on_zero():
    rng = np.random.default_rng(8)
    actual = rng.integers(0, 6, size=500)
    predicted = rng.integers(0, 6, size=500)
    values = []
    for _ in range(200):
        values.append(quadratic_weighted_kappa(
            actual, rng.permutation(predicted), 6
        ))
    assert abs(float(np.mean(values))) < 0.05


def test_kappa_validates_inputs():
    with pytest.raises(ContractError):
        quadratic_weighted_kappa([0, 1], [0], 2)
    with pytest.raises(ContractError):
        quadratic_weighted_kappa([0, 5], [0, 1], 3)
    with pytest.raises(ContractError):
        quadratic_weighted_kappa([], [], 3)


def test_kappa_weights_shape():
    w = kappa_weights(6)
    assert np.all(np.diag(w) == 0.0)
    np.testing.assert_array_equal(w, w.T)
    assert w[0, 5] == w.max() == 25.0 / 5.0


# --- confusion -----------------------------------------------------------------


def test_confusion_single_pair():
    counts = confusion([2], [3], 6)
    assert counts[2, 3] == 1 and counts.sum() == 1


def test_confusion_repeated_pair():
    counts = confusion([1] * 5, [1] * 5, 6)
    assert counts[1, 1] == 5 and counts.sum() == 5


def test_confusion_margins_match_histogram_oracle():
    rng = np.random.default_rng(12)
    actual = rng.integers(0, 4, size=200)
    predicted = rng.integers(0, 4, size=200)
    counts = confusion(actual, predicted, 4)
    np.testing.assert_array_equal(counts.sum(axis=1), np.bincount(actual, minlength=4))
    np.testing.assert_array_equal(counts.sum(axis=0), np.bincount(predicted, minlength=4))
    assert counts.sum() == 200


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=60))
def test_confusion_total_equals_sample_count(labels):
    rng = np.random.default_rng(len(labels))
    predicted = rng.integers(0, 4, size=len(labels))
    assert confusion(labels, predicted, 4).sum() == len(labels)


# --- ISUP mapping -----------------------------------------------------------------


@pytest.mark.parametrize("pair,grade", [
    ((3, 3), 1),   # total 6
    ((3, 4), 2),   # 7 with primary 3
    ((4, 3), 3),   # 7 with primary 4
    ((4, 4), 4),   # total 8
    ((5, 4), 5),   # total 9
    ((5, 5), 5),   # total 10
])
def test_isup_grade_reference_rows(pair, grade):
    assert isup_grade(*pair) == grade


def test_isup_grade_full_enumeration():
    for primary in range(1, 6):
        for secondary in range(1, 6):
            total = primary + secondary
            if total <= 6:
                expected = 1
            elif total == 7:
                expected = 2 if primary <= 3 else 3
            elif total == 8:
                expected = 4
            else:
                expected = 5
            assert isup_grade(primary, secondary) == expected


def test_isup_grade_rejects_out_of_range():
    with pytest.raises(ContractError):
        isup_grade(0, 3)
    with pytest.raises(ContractError):
        isup_grade(3, 6)


# --- report formatting ----------------------------------------------------------


def test_metrics_block_roundtrip():
    rows = [
        ("slide_0000", 0, 0, [0.7, 0.2, 0.1]),
        ("slide_0001", 1, 2, [0.1, 0.3, 0.6]),
        ("slide_0002", 2, 2, [0.05, 0.15, 0.8]),
    ]
    block = format_metrics_block("gcn-small", rows, 3)
    parsed = parse_metrics_report(block)
    assert set(parsed) == {"gcn-small"}
    info = parsed["gcn-small"]
    assert info["slides"] == 3
    assert info["accuracy"] == pytest.approx(2 / 3, abs=1e-6)
    assert info["kappa"] == pytest.approx(
        quadratic_weighted_kappa([0, 1, 2], [0, 2, 2], 3), abs=1e-6
    )
    assert info["rows"][1][0] == "slide_0001"
    assert info["confusion"] == [[1, 0, 0], [0, 0, 1], [0, 0, 1]]
    assert accuracy([0, 1, 2], [0, 2, 2], 3) == pytest.approx(2 / 3)
