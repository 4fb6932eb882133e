import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqlab.freqstats import assign_groups, build_frequency_table
from eqlab.losses import LossSpec, eql_loss, sigmoid_ce
from eqlab.telemetry import (
    LEDGER_COLUMNS,
    GradientLedger,
    ProbabilityLedger,
    evaluate,
    evaluate_logits,
    group_means,
    ledger_rows,
    ledgers_to_json,
    record_gradients,
    record_probabilities,
    rows_to_csv,
    topk_predictions,
)
from eqlab.trainer import Model


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------- gradient ledger


def test_hand_computed_two_class_batch():
    X = np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    y = np.array([0, 1, -1, 0])
    Z = np.array([[0.5, -1.0], [2.0, 0.0], [-0.3, 0.7], [0.0, 0.0]])
    led = record_gradients(GradientLedger(2), sigmoid_ce(Z, y).grad_logits, X, y)

    norms = [5.0, 1.0, 2.0, math.sqrt(2.0)]
    pos = [0.0, 0.0]
    neg = [0.0, 0.0]
    for i in range(4):
        for j in range(2):
            target = 1.0 if y[i] == j else 0.0
            contrib = abs(sigmoid(Z[i, j]) - target) * norms[i]
            if target:
                pos[j] += contrib
            else:
                neg[j] += contrib
    np.testing.assert_allclose(led.pos_norm_sum, pos, rtol=1e-14)
    np.testing.assert_allclose(led.neg_norm_sum, neg, rtol=1e-14)
    np.testing.assert_array_equal(led.pos_count, [2, 1])
    np.testing.assert_array_equal(led.neg_count, [2, 3])
    assert led.iterations == 1


def test_eql_tail_class_collects_no_negative_gradient():
    table = build_frequency_table([900, 800, 2], 1000)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(16, 5))
    y = rng.integers(0, 2, size=16)  # foreground only, never class 2
    res = eql_loss(rng.normal(size=(16, 3)), y, table, LossSpec("eql", lam=5e-3))
    led = record_gradients(GradientLedger(3), res.grad_logits, X, y)
    assert led.neg_norm_sum[2] == 0.0
    assert led.neg_norm_sum[0] > 0.0


def test_zero_features_contribute_nothing():
    led = record_gradients(GradientLedger(3), np.ones((2, 3)), np.zeros((2, 4)), np.array([0, -1]))
    assert np.all(led.pos_norm_sum == 0.0) and np.all(led.neg_norm_sum == 0.0)
    np.testing.assert_array_equal(led.pos_count + led.neg_count, [2, 2, 2])


def test_means_are_null_without_contributions():
    led = record_gradients(GradientLedger(2), np.ones((1, 2)), np.ones((1, 1)), np.array([0]))
    assert np.isnan(led.pos_mean()[1])
    assert led.pos_mean()[0] == 1.0
    assert led.neg_mean()[1] == 1.0
    rows = ledger_rows(build_frequency_table([5, 3], 10), led, None)
    assert rows[1]["pos_mean"] is None


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ValueError):
        record_gradients(GradientLedger(3), np.ones((2, 2)), np.ones((2, 4)), np.array([0, 1]))
    with pytest.raises(ValueError):
        record_gradients(GradientLedger(2), np.ones((2, 2)), np.ones((3, 4)), np.array([0, 1]))
    with pytest.raises(ValueError):
        record_probabilities(ProbabilityLedger(2), np.ones((2, 3)), np.array([0, 1]))


batches = st.lists(
    st.tuples(
        arrays(np.int64, (3, 4), elements=st.integers(-8, 8)),
        arrays(np.int64, (3, 2), elements=st.integers(-4, 4)),
        arrays(np.int64, 3, elements=st.integers(-1, 3)),
    ),
    min_size=1,
    max_size=6,
)


def accumulate(seq):
    led = GradientLedger(4)
    for g, x, y in seq:
        record_gradients(led, g.astype(float), x[:, :1].astype(float), y)  # |x| integral keeps sums exact
    return led


def same(a, b):
    return all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("pos_norm_sum", "neg_norm_sum", "pos_count", "neg_count")) and a.iterations == b.iterations


@given(batches, batches, batches)
def test_merge_is_associative_and_commutative(a, b, c):
    la, lb, lc = accumulate(a), accumulate(b), accumulate(c)
    assert same(la.merge(lb).merge(lc), la.merge(lb.merge(lc)))
    assert same(la.merge(lb), lb.merge(la))
    assert same(la.merge(lb).merge(lc), accumulate(a + b + c))


def test_ledger_dict_round_trip():
    rng = np.random.default_rng(2)
    led = record_gradients(GradientLedger(3), rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), np.array([0, 1, 2, -1, 0]))
    back = GradientLedger.from_dict(json.loads(json.dumps(led.to_dict())))
    assert same(led, back)


# ---------------------------------------------------------------- probability ledger


def test_single_sample_probability():
    led = record_probabilities(ProbabilityLedger(3), np.array([[0.1, 0.7, 0.2]]), np.array([1]))
    avg = led.average()
    assert avg[1] == 0.7
    assert np.isnan(avg[0]) and np.isnan(avg[2])


def test_background_samples_are_not_positives():
    led = record_probabilities(ProbabilityLedger(2), np.array([[0.9, 0.9], [0.2, 0.4]]), np.array([-1, 0]))
    np.testing.assert_array_equal(led.count, [1, 0])
    assert led.average()[0] == 0.2


def test_probability_merge():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    a = record_probabilities(ProbabilityLedger(2), p[:1], np.array([1]))
    b = record_probabilities(ProbabilityLedger(2), p[1:], np.array([0]))
    m = a.merge(b)
    np.testing.assert_array_equal(m.average(), [0.6, 0.8])
    assert ProbabilityLedger.from_dict(m.to_dict()).count.tolist() == [1, 1]


# ---------------------------------------------------------------- evaluation


def test_oracle_model_scores_perfectly():
    counts = np.array([200, 50, 5])
    table = build_frequency_table(counts, 255)
    y = np.repeat(np.arange(3), 4)
    logits = np.eye(3)[y] * 10.0
    rep = evaluate_logits(logits, y, [assign_groups(table), assign_groups(table, "shot")])
    assert rep.top1 == 1.0 and rep.top5 == 1.0
    assert all(v == 1.0 for v in rep.group_acc.values())


def test_uniform_random_logits_hit_chance():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 100, size=10_000)
    rep = evaluate_logits(rng.random((10_000, 100)), y)
    assert abs(rep.top1 - 0.01) < 0.005
    assert abs(rep.top5 - 0.05) < 0.01


@given(st.integers(0, 2**32 - 1))
def test_group_accuracies_partition_top1(seed):
    rng = np.random.default_rng(seed)
    C = 12
    counts = rng.integers(1, 300, size=C)
    table = build_frequency_table(counts, 300)
    y = rng.integers(0, C, size=200)
    rep = evaluate_logits(rng.normal(size=(200, C)), y, [assign_groups(table)])
    groups = [g for g in ("rare", "common", "frequent") if rep.group_counts[g]]
    assert sum(rep.group_correct[g] for g in groups) == round(rep.top1 * 200)
    weighted = sum(rep.group_acc[g] * rep.group_counts[g] for g in groups) / 200
    assert weighted == pytest.approx(rep.top1, rel=1e-15, abs=0)
    assert all(0.0 <= rep.group_acc[g] <= 1.0 for g in groups)


def test_empty_group_is_null():
    table = build_frequency_table([500, 300], 1000)  # no rare or common classes
    rep = evaluate_logits(np.eye(2), np.array([0, 1]), [assign_groups(table)])
    assert rep.group_acc["rare"] is None and rep.group_acc["common"] is None
    assert rep.group_acc["frequent"] == 1.0
    assert json.loads(json.dumps(rep.to_dict()))["group_acc"]["rare"] is None


def test_ties_break_toward_lower_index():
    logits = np.array([[1.0, 3.0, 3.0, 3.0, 0.0]])
    np.testing.assert_array_equal(topk_predictions(logits, 3), [[1, 2, 3]])
    rep = evaluate_logits(np.zeros((1, 4)), np.array([0]))
    assert rep.top1 == 1.0


def test_evaluate_uses_the_model():
    W = np.eye(3)
    model = Model(W, np.zeros(3))
    X = np.array([[1.0, 0, 0], [0, 0, 2.0], [0, 1.0, 0]])
    rep = evaluate(model, (X, np.array([0, 2, 0])))
    assert rep.top1 == pytest.approx(2 / 3)


def test_invalid_test_labels():
    with pytest.raises(ValueError):
        evaluate_logits(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        evaluate_logits(np.zeros((0, 3)), np.array([], dtype=int))


# ---------------------------------------------------------------- export


def test_ledger_rows_sorted_by_descending_count():
    table = build_frequency_table([5, 40, 5, 12], 50)
    led = GradientLedger(4)
    rows = ledger_rows(table, led, ProbabilityLedger(4), assign_groups(table))
    assert [r["category"] for r in rows] == [1, 3, 0, 2]
    assert [r["group"] for r in rows] == ["common", "common", "rare", "rare"]
    text = rows_to_csv(rows, LEDGER_COLUMNS)
    lines = text.splitlines()
    assert lines[0] == ",".join(LEDGER_COLUMNS)
    assert len(lines) == 5
    # empty ledgers export null means as empty cells
    assert lines[1].split(",")[LEDGER_COLUMNS.index("pos_mean")] == ""


def test_group_means_ignore_nan():
    table = build_frequency_table([5, 40, 5], 50)
    out = group_means(np.array([1.0, 2.0, np.nan]), assign_groups(table))
    assert out == {"rare": 1.0, "common": 2.0, "frequent": None}


def test_ledgers_json():
    doc = json.loads(ledgers_to_json(GradientLedger(2), None))
    assert doc["probabilities"] is None
    assert doc["gradients"]["num_classes"] == 2
