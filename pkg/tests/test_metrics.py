import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imumatch.metrics import (
    Outcome,
    evaluate,
    outcomes_from,
    participant_f1,
    participant_precision,
    participant_recall,
    time_weighted_metrics,
)
from imumatch.undefined import UNDEFINED

L = {"A", "B", "C"}


def brute_force(outcomes, participants):
    """Index sets built by enumeration; cardinalities or duration sums over them."""
    idx = range(len(outcomes))
    predicted = {j for j in idx if outcomes[j].predicted in participants}
    actual = {j for j in idx if outcomes[j].actual in participants}
    correct = {j for j in idx if outcomes[j].predicted is not UNDEFINED
               and outcomes[j].predicted is not None and outcomes[j].predicted == outcomes[j].actual}

    def measure(S, weighted):
        return math.fsum(outcomes[j].duration for j in sorted(S)) if weighted else float(len(S))

    out = {}
    for weighted in (False, True):
        pp = measure(predicted & correct, weighted) / measure(predicted, weighted) if predicted else UNDEFINED
        pr = measure(actual & correct, weighted) / measure(actual, weighted) if actual else UNDEFINED
        if pp is UNDEFINED or pr is UNDEFINED:
            pf = UNDEFINED
        elif pp == 0 and pr == 0:
            pf = 0.0
        else:
            pf = 2 * pp * pr / (pp + pr)
        out[weighted] = (pp, pr, pf)
    return out


outcome_sets = st.lists(
    st.tuples(
        st.sampled_from(["A", "B", "C", None, UNDEFINED]),
        st.sampled_from(["A", "B", "C", None]),
        st.floats(0.1, 600.0),
    ),
    max_size=20,
).map(lambda rows: [Outcome(f"t{i}", p, a, d) for i, (p, a, d) in enumerate(rows)])


def same(a, b):
    return a is b if a is UNDEFINED or b is UNDEFINED else a == b


class TestOracle:
    @settings(max_examples=1000, deadline=None)
    @given(outcomes=outcome_sets)
    def test_matches_enumeration(self, outcomes):
        expect = brute_force(outcomes, L)
        rep = evaluate(outcomes, L)
        for got, want in zip((rep.PP, rep.PR, rep.PF), expect[False]):
            assert same(got, want)
        for got, want in zip(time_weighted_metrics(outcomes, L), expect[True]):
            assert same(got, want)

    @settings(max_examples=300, deadline=None)
    @given(outcomes=outcome_sets)
    def test_bounds(self, outcomes):
        rep = evaluate(outcomes, L)
        for pp, pr, pf in ((rep.PP, rep.PR, rep.PF), (rep.PP_w, rep.PR_w, rep.PF_w)):
            if pf is UNDEFINED:
                continue
            for v in (pp, pr, pf):
                assert 0.0 <= v <= 1.0
            assert min(pp, pr) - 1e-15 <= pf <= max(pp, pr) + 1e-15


class TestExamples:
    def test_hand_case(self):
        outs = [Outcome("1", "A", "A"), Outcome("2", None, "B"), Outcome("3", "B", "B")]
        pp = participant_precision(outs, {"A", "B"})
        pr = participant_recall(outs, {"A", "B"})
        assert pp == 1.0 and pr == pytest.approx(2 / 3)
        assert participant_f1(pp, pr) == pytest.approx(0.8)
        assert participant_f1(1.0, 2 / 3) == pytest.approx(0.8)

    def test_all_null_precision_undefined(self):
        outs = [Outcome("1", None, "A"), Outcome("2", None, None)]
        assert participant_precision(outs, L) is UNDEFINED
        assert participant_f1(participant_precision(outs, L), 0.0) is UNDEFINED

    def test_undefined_counts_as_wrong(self):
        outs = [Outcome("1", UNDEFINED, "A"), Outcome("2", UNDEFINED, "B")]
        assert participant_recall(outs, L) == 0.0

    def test_no_participant_tracks(self):
        assert participant_recall([Outcome("1", "A", None)], L) is UNDEFINED

    def test_f1_degenerate(self):
        assert participant_f1(0.0, 0.0) == 0.0
        assert participant_f1(1.0, 1.0) == 1.0

    def test_long_correct_track_dominates(self):
        outs = [Outcome("1", "A", "A", 500.0), Outcome("2", "B", "A", 10.0)]
        assert participant_precision(outs, L) == 0.5
        assert participant_precision(outs, L, weighted=True) == pytest.approx(500 / 510)

    def test_null_prediction_on_non_participant_is_harmless(self):
        outs = [Outcome("1", "A", "A"), Outcome("2", None, None)]
        rep = evaluate(outs, L)
        assert (rep.PP, rep.PR, rep.PF, rep.n_null) == (1.0, 1.0, 1.0, 1)

    def test_outcomes_from_missing_prediction(self):
        outs = outcomes_from({"a": "A"}, {"a": "A", "b": "B"}, {"a": 3.0, "b": 4.0})
        assert outs[1].predicted is UNDEFINED and outs[1].duration == 4.0

    def test_rows(self):
        rep = evaluate([Outcome("1", UNDEFINED, "A")], L)
        rows = {(m, w): v for m, v, w in rep.rows()}
        assert rows[("PR", 0)] == 0.0 and rows[("PP", 1)] is UNDEFINED
        assert rows[("n_undefined", "")] == 1

    def test_nonpositive_duration(self):
        with pytest.raises(ValueError):
            Outcome("x", None, None, 0.0)
