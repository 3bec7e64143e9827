"""Participant precision, recall and F1 over per-track outcomes.

For tracks j with true label y_j (a participant id or None) and prediction
yhat_j (a participant id, None, or UNDEFINED):

* precision: among tracks predicted as some participant, the share predicted correctly;
* recall: among tracks truly belonging to a participant, the share predicted correctly;
* F1: harmonic mean of the two.

UNDEFINED predictions are never correct. A ratio whose denominator is empty is
UNDEFINED. The time-weighted variants weight every track by its duration; the
weighted F1 is the harmonic mean of weighted precision and recall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .undefined import UNDEFINED


@dataclass(frozen=True)
class Outcome:
    track_id: str
    predicted: object  # participant id, None or UNDEFINED
    actual: str | None
    duration: float = 1.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"track {self.track_id}: duration must be positive")


def _weight(o: Outcome, weighted: bool) -> float:
    return o.duration if weighted else 1.0


def _ratio(num: list, den: list):
    if not den:
        return UNDEFINED
    return math.fsum(num) / math.fsum(den)


def participant_precision(outcomes, participants, weighted: bool = False):
    participants = set(participants)
    den = [_weight(o, weighted) for o in outcomes if o.predicted in participants]
    num = [_weight(o, weighted) for o in outcomes if o.predicted in participants and o.predicted == o.actual]
    return _ratio(num, den)


def participant_recall(outcomes, participants, weighted: bool = False):
    participants = set(participants)
    den = [_weight(o, weighted) for o in outcomes if o.actual in participants]
    num = [_weight(o, weighted) for o in outcomes if o.actual in participants and o.predicted == o.actual]
    return _ratio(num, den)


def participant_f1(pp, pr):
    if pp is UNDEFINED or pr is UNDEFINED:
        return UNDEFINED
    if pp + pr == 0:
        return 0.0
    return 2.0 * pp * pr / (pp + pr)


def time_weighted_metrics(outcomes, participants):
    """``(PP_w, PR_w, PF_w)`` with every track weighted by its duration."""
    outcomes = list(outcomes)
    ppw = participant_precision(outcomes, participants, weighted=True)
    prw = participant_recall(outcomes, participants, weighted=True)
    return ppw, prw, participant_f1(ppw, prw)


@dataclass(frozen=True)
class MetricReport:
    PP: object
    PR: object
    PF: object
    PP_w: object
    PR_w: object
    PF_w: object
    n_tracks: int
    n_null: int
    n_undefined: int

    def rows(self):
        """``(metric, value, weighted)`` rows, then prediction counts."""
        out = []
        for name in ("PP", "PR", "PF"):
            out.append((name, getattr(self, name), 0))
            out.append((name, getattr(self, name + "_w"), 1))
        out += [("n_tracks", self.n_tracks, ""), ("n_null", self.n_null, ""), ("n_undefined", self.n_undefined, "")]
        return out


def evaluate(outcomes, participants) -> MetricReport:
    outcomes = list(outcomes)
    pp, pr = participant_precision(outcomes, participants), participant_recall(outcomes, participants)
    return MetricReport(
        pp, pr, participant_f1(pp, pr), *time_weighted_metrics(outcomes, participants),
        n_tracks=len(outcomes),
        n_null=sum(o.predicted is None for o in outcomes),
        n_undefined=sum(o.predicted is UNDEFINED for o in outcomes),
    )


def outcomes_from(assignment: dict, truth: dict, durations: dict | None = None) -> list:
    """Join predictions with labels; tracks missing from ``assignment`` are UNDEFINED."""
    durations = durations or {}
    return [
        Outcome(t, assignment.get(t, UNDEFINED), truth[t], float(durations.get(t, 1.0)))
        for t in truth
    ]
