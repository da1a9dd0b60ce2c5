import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from instsynth.core import DegenerateData, EmptyInput
from instsynth.provider import ScriptedProvider
from instsynth.switch import (
    PUBLISHED_WEIGHTS,
    AlgoVerdict,
    CriteriaVector,
    Decision,
    LogisticModel,
    UnclassifiedInstance,
    accuracy,
    calibration_csv,
    calibration_curve,
    classify_algorithmicity,
    decide,
    decisive_label,
    lodo_eval,
    parse_binary_list,
    rule_verdict,
    score_criteria,
    train_switch,
    zero_shot_decide,
)
from support import make_instance


def vec(*scores):
    return CriteriaVector(tuple(scores))


def last_only(p10):
    return vec(*([0.5] * 9 + [p10]))


# scoring

def test_score_criteria_direct_parse():
    p = ScriptedProvider(["Reasoning...\nFINAL ANSWER: [0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0]"])
    scored = score_criteria(make_instance(), p, "m")
    assert scored.vector.scores == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    assert scored.vector.parse_warnings == ()


def test_score_criteria_retry_after_short_list():
    p = ScriptedProvider(["FINAL ANSWER: [0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9]",
                          "FINAL ANSWER: [0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.9]"])
    scored = score_criteria(make_instance(), p, "m")
    assert scored.vector.scores[-1] == 0.9
    assert len(scored.vector.parse_warnings) == 1
    assert [m.role for m in p.calls[1].messages] == ["user", "assistant", "user"]


def test_score_criteria_clamps():
    p = ScriptedProvider(["FINAL ANSWER: [1.3,0,0,0,0,0,0,0,0,0]"])
    v = score_criteria(make_instance(), p, "m").vector
    assert v.scores[0] == 1.0 and any("clamped" in w for w in v.parse_warnings)


def test_score_criteria_defaults_after_two_reprompts():
    p = ScriptedProvider(["nothing"] * 3)
    v = score_criteria(make_instance(), p, "m").vector
    assert v.scores == (0.5,) * 10 and len(p.calls) == 3
    assert "defaulted" in v.parse_warnings[-1]


def test_score_criteria_uses_last_marker():
    p = ScriptedProvider(["FINAL ANSWER: [0,0,0,0,0,0,0,0,0,0]\nwait\nFINAL ANSWER: [1,1,1,1,1,1,1,1,1,0.7]"])
    assert score_criteria(make_instance(), p, "m").vector.scores[-1] == 0.7


# decisions

@pytest.mark.parametrize("p10,expected", [(0.9, Decision.SYNTHESIS), (0.3, Decision.COT), (0.5, Decision.SYNTHESIS)])
def test_zero_shot(p10, expected):
    assert zero_shot_decide(last_only(p10)) is expected


def test_decide_zero_model_is_boundary_synthesis():
    prob, d = decide(LogisticModel((0.0,) * 10, 0.0), last_only(0.2))
    assert prob == 0.5 and d is Decision.SYNTHESIS


def test_decide_published_row_all_ones():
    weights = PUBLISHED_WEIGHTS["gemini-2.0-flash"]
    model = LogisticModel(weights, bias=-0.3)
    prob, _ = decide(model, vec(*([1.0] * 10)))
    assert prob == pytest.approx(1 / (1 + math.exp(-(sum(weights) - 0.3))), abs=1e-12)


score = st.floats(0, 1, allow_nan=False)
scores10 = st.lists(score, min_size=10, max_size=10)


@given(scores10, st.integers(0, 9), st.floats(0, 1))
def test_decide_monotone_in_positive_weights(scores, i, bump):
    model = LogisticModel(PUBLISHED_WEIGHTS["gpt-4.1-mini"], bias=-1.0)
    if model.weights[i] <= 0:
        return
    raised = list(scores)
    raised[i] = min(1.0, raised[i] + bump)
    assert decide(model, vec(*raised))[0] >= decide(model, vec(*scores))[0]


@given(scores10, st.floats(0.01, 0.99))
def test_decision_equals_margin_rule(scores, threshold):
    model = LogisticModel(PUBLISHED_WEIGHTS["o4-mini"], bias=-0.8, threshold=threshold)
    prob, d = decide(model, vec(*scores))
    z = model.margin(vec(*scores))
    assert (d is Decision.SYNTHESIS) == (z >= math.log(threshold / (1 - threshold)))


def test_zero_shot_is_limit_of_logistic():
    W = 1e3
    model = LogisticModel((0.0,) * 9 + (W,), -W / 2)
    rng = np.random.default_rng(3)
    for p10 in rng.random(500):
        if p10 == 0.5:
            continue
        v = last_only(float(p10))
        assert decide(model, v)[1] is zero_shot_decide(v)


def test_zero_shot_matches_threshold_on_random_vectors():
    rng = np.random.default_rng(11)
    for row in rng.random((1000, 10)):
        v = vec(*row.tolist())
        assert (zero_shot_decide(v) is Decision.SYNTHESIS) == (row[9] >= 0.5)


# training

def separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 10))
    X = X[np.abs(X[:, 9] - 0.5) > 0.02]
    return [(vec(*x.tolist()), bool(x[9] > 0.5)) for x in X]


def test_train_separable_accuracy():
    samples = separable()
    model = train_switch(samples)
    assert accuracy(model, samples) >= 0.99
    assert model.training_meta.converged


def test_label_flip_negates_parameters():
    samples = separable(200, seed=1)
    noisy = [(v, (not y) if i % 7 == 0 else y) for i, (v, y) in enumerate(samples)]
    for data in (samples, noisy):
        a = train_switch(data)
        b = train_switch([(v, not y) for v, y in data])
        assert np.allclose(a.weights, [-w for w in b.weights], atol=1e-6)
        assert a.bias == pytest.approx(-b.bias, abs=1e-6)


def grid_oracle(xs, ys, l2=1e-4):
    w = np.arange(-5, 5.0001, 0.01)
    b = np.arange(-5, 5.0001, 0.01)
    W, B = np.meshgrid(w, b, indexing="ij")
    loss = np.zeros_like(W)
    for x, y in zip(xs, ys):
        z = W * x + B
        loss += np.logaddexp(0, -z) if y else np.logaddexp(0, z)
    loss = loss / len(xs) + 0.5 * l2 * W**2
    i, j = np.unravel_index(np.argmin(loss), loss.shape)
    return W[i, j], B[i, j]


def test_grid_search_oracle_agreement():
    xs, ys = [0.2, 0.4, 0.6, 0.8], [False, True, False, True]
    samples = [(vec(*([0.0] * 9 + [x])), y) for x, y in zip(xs, ys)]
    model = train_switch(samples)
    w_star, b_star = grid_oracle(xs, ys)
    assert model.weights[9] == pytest.approx(w_star, abs=0.02)
    assert model.bias == pytest.approx(b_star, abs=0.02)
    assert all(abs(w) < 1e-9 for w in model.weights[:9])


def test_training_is_deterministic():
    samples = separable(150, seed=4)
    assert train_switch(samples).to_dict() == train_switch(samples).to_dict()


def test_training_needs_both_labels():
    with pytest.raises(DegenerateData):
        train_switch([(last_only(0.9), True)])
    with pytest.raises(DegenerateData):
        train_switch([])


def test_model_json_round_trip(tmp_path):
    samples = separable(100, seed=2)
    model = train_switch(samples)
    model.save(tmp_path / "m.json")
    loaded = LogisticModel.load(tmp_path / "m.json")
    assert loaded == model
    assert [decide(loaded, v) for v, _ in samples] == [decide(model, v) for v, _ in samples]
    assert set(json.loads((tmp_path / "m.json").read_text())) == {"weights", "bias", "threshold", "training_meta"}


def test_decisive_label():
    assert decisive_label(True, False) is True
    assert decisive_label(False, True) is False
    assert decisive_label(True, True) is None and decisive_label(False, False) is None


# calibration

def test_calibration_direct_count():
    preds = [(0.9, i < 9) for i in range(10)]
    (b,) = calibration_curve(preds, 10)
    assert b.empirical_rate == pytest.approx(0.9) and b.count == 10


def test_calibration_perfectly_calibrated_generator():
    rng = np.random.default_rng(0)
    p = rng.random(10_000)
    labels = rng.random(10_000) < p
    bins = calibration_curve(list(zip(p.tolist(), labels.tolist())), 10)
    assert max(abs(b.bin_mid - b.empirical_rate) for b in bins) < 0.05


def test_calibration_single_bin_is_overall_rate():
    preds = [(0.1, True), (0.7, False), (1.0, True)]
    (b,) = calibration_curve(preds, 1)
    assert b.empirical_rate == pytest.approx(2 / 3)


@given(st.lists(st.tuples(score, st.booleans()), min_size=1, max_size=200), st.integers(1, 20))
def test_calibration_weighted_rate_equals_overall(preds, n_bins):
    bins = calibration_curve(preds, n_bins)
    total = sum(b.count for b in bins)
    positives = sum(round(b.empirical_rate * b.count) for b in bins)
    assert total == len(preds)
    assert positives == sum(y for _, y in preds)


def test_calibration_errors_and_csv():
    with pytest.raises(EmptyInput):
        calibration_curve([], 10)
    csv_text = calibration_csv(calibration_curve([(0.25, True)], 2))
    assert csv_text.splitlines() == ["bin_mid,empirical_rate,count", "0.25,1,1"]


# leave one dataset out

def task_samples(seed, invert=False, n=120):
    return [(v, (not y) if invert else y) for v, y in separable(n, seed)]


def test_lodo_identical_tasks_symmetric():
    data = task_samples(5)
    rows = lodo_eval({"a": data, "b": list(data)})
    assert len(rows) == 2 and rows[0].accuracy == rows[1].accuracy


def test_lodo_fold_count():
    rows = lodo_eval({t: task_samples(i) for i, t in enumerate("abcd")})
    assert [r.task for r in rows] == ["a", "b", "c", "d"]


def test_lodo_inverted_task_fails_its_fold():
    grouped = {"a": task_samples(1), "b": task_samples(2), "c": task_samples(3), "bad": task_samples(4, invert=True)}
    rows = {r.task: r.accuracy for r in lodo_eval(grouped)}
    assert rows["bad"] < 0.5
    assert all(rows[t] > 0.5 for t in "abc")


def test_lodo_needs_two_tasks():
    with pytest.raises(DegenerateData):
        lodo_eval({"a": task_samples(1)})


# algorithmicity

def test_algorithmicity_eight_ones_consistent():
    v = AlgoVerdict.from_list([1] * 8 + [0, 0, 1])
    assert v.final and v.consistent_with_rule


def test_algorithmicity_zero_case():
    v = AlgoVerdict.from_list([0] * 11)
    assert not v.final and v.consistent_with_rule


def test_algorithmicity_inconsistent_flag():
    v = AlgoVerdict.from_list([1] * 7 + [0, 0, 0, 1])
    assert v.final and not v.consistent_with_rule


def test_algorithmicity_rule_exhaustive():
    for bits in itertools.product([False, True], repeat=10):
        expected = sum(bits) >= 8
        assert rule_verdict(bits) is expected
        for final in (False, True):
            assert AlgoVerdict(bits, final).consistent_with_rule == (final == expected)


def test_classify_algorithmicity_with_retry_and_warning():
    p = ScriptedProvider(["I think it is algorithmic.", "FINAL: [1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1]"])
    result = classify_algorithmicity(make_instance(), p, "m")
    assert result.verdict.final and not result.verdict.consistent_with_rule
    assert result.warnings and len(p.calls) == 2


def test_classify_algorithmicity_gives_up():
    with pytest.raises(UnclassifiedInstance):
        classify_algorithmicity(make_instance(), ScriptedProvider(["no list"] * 3), "m")


def test_parse_binary_list_takes_last():
    text = "[0,0,0,0,0,0,0,0,0,0,0] then [1,1,1,1,1,1,1,1,1,1,1]"
    assert parse_binary_list(text) == [1] * 11
    assert parse_binary_list("[1, 0]") is None
