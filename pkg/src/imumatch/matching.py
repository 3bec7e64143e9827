"""Incremental track-to-sensor matching from per-window probabilities and reliabilities.

For every (track, sensor) pair only windows with reliability strictly above
``R_csdr`` are kept, and their probabilities averaged. A track is matched to a
sensor once that sensor is the *only* candidate whose average exceeds
``P_acpt``; a pair whose average falls below ``1 - P_acpt`` is ruled out for
good. Both kinds of decision are permanent.

Assumptions: a track belongs to at most one sensor; a sensor may own any number
of tracks at the same time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .errors import ConfigError, OrderingError
from .undefined import UNDEFINED

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"
DEFERRED = "deferred"

# (R_csdr, P_acpt) per window length, selected by the threshold grid search
DEFAULT_THRESHOLDS = {100: (0.3, 0.7), 300: (0.1, 0.7), 600: (0.1, 0.9)}


@dataclass(frozen=True)
class MatchConfig:
    R_csdr: float = 0.1
    P_acpt: float = 0.7
    N_min: int = 1

    def __post_init__(self):
        if not 0.5 <= self.P_acpt <= 1.0:
            raise ConfigError("P_acpt must lie in [0.5, 1]", "P_acpt")
        if not 0.0 <= self.R_csdr <= 1.0:
            raise ConfigError("R_csdr must lie in [0, 1]", "R_csdr")
        if int(self.N_min) != self.N_min or self.N_min < 1:
            raise ConfigError("N_min must be a positive integer", "N_min")

    @classmethod
    def for_window(cls, W: int, N_min: int = 1) -> "MatchConfig":
        if W not in DEFAULT_THRESHOLDS:
            raise ConfigError(f"no default thresholds for W={W}; set R_csdr and P_acpt", "W")
        R, P = DEFAULT_THRESHOLDS[W]
        return cls(R, P, N_min)


@dataclass(frozen=True)
class Decision:
    kind: str
    track_id: str
    sensor_id: str | None
    step: int | None = None


def _add_exact(partials: list, x: float) -> None:
    """Add ``x`` to a list of non-overlapping partial sums (Shewchuk), in place."""
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


class _PairAccumulator:
    __slots__ = ("partials", "count", "last_step")

    def __init__(self):
        self.partials: list = []
        self.count = 0
        self.last_step = None

    @property
    def mean(self):
        # exact sum, so the mean does not depend on arrival order
        return math.fsum(self.partials) / self.count if self.count else None


class MatchState:
    """Candidate sets, accumulators and confirmed decisions.

    Single-writer: ``ingest`` and ``decide`` must not interleave across threads.
    """

    def __init__(self, config: MatchConfig | None = None):
        self.config = config or MatchConfig()
        self.candidates: dict[str, dict[str, None]] = {}  # ordered sets
        self.positives: dict[str, str] = {}
        self.negatives: set[tuple[str, str]] = set()
        self.ever_candidates: set[str] = set()
        self._acc: dict[tuple[str, str], _PairAccumulator] = {}
        self._dirty: set[str] = set()
        self.decisions: list[Decision] = []
        self.ignored = 0
        self.step = None

    # ---------------------------------------------------------------- queries

    def tracks(self) -> list[str]:
        return list(self.candidates)

    def reliable_count(self, track_id: str, sensor_id: str) -> int:
        acc = self._acc.get((track_id, sensor_id))
        return acc.count if acc else 0

    def reliable_mean(self, track_id: str, sensor_id: str):
        """Reliable probability average, or None while no reliable window was seen."""
        acc = self._acc.get((track_id, sensor_id))
        return acc.mean if acc else None

    # ---------------------------------------------------------------- updates

    def ingest(self, track_id: str, sensor_id: str, step: int, p: float, r: float) -> None:
        key = (track_id, sensor_id)
        acc = self._acc.get(key)
        if acc is None:
            acc = self._acc[key] = _PairAccumulator()
        if acc.last_step is not None and step <= acc.last_step:
            raise OrderingError(
                f"step {step} for ({track_id}, {sensor_id}) does not follow step {acc.last_step}"
            )
        acc.last_step = step
        self.step = step if self.step is None else max(self.step, step)

        cands = self.candidates.setdefault(track_id, {})
        if track_id in self.positives or key in self.negatives:
            if r > self.config.R_csdr:
                self.ignored += 1
                log.debug("ignoring score for settled pair %s at step %s", key, step)
            return
        cands.setdefault(sensor_id, None)
        self.ever_candidates.add(track_id)
        if r > self.config.R_csdr:
            _add_exact(acc.partials, float(p))
            acc.count += 1
            self._dirty.add(track_id)

    def decide(self, everything: bool = False) -> list[Decision]:
        """Confirm whatever the evidence now allows.

        Only tracks whose accumulators changed since the last call are revisited
        unless ``everything`` is set; the outcome for an unchanged track cannot
        differ from last time.
        """
        cfg = self.config
        todo = list(self.candidates) if everything else [t for t in self.candidates if t in self._dirty]
        self._dirty.clear()
        out = []
        for t in todo:
            if t in self.positives:
                continue
            cands = self.candidates[t]
            defined = {}
            for m in cands:
                acc = self._acc.get((t, m))
                if acc is not None and acc.count >= cfg.N_min:
                    defined[m] = acc.mean
            if not defined:
                continue
            for m, mean in defined.items():
                if mean < 1.0 - cfg.P_acpt:
                    del cands[m]
                    self.negatives.add((t, m))
                    out.append(Decision(NEGATIVE, t, m, self.step))
            above = [m for m, mean in defined.items() if m in cands and mean > cfg.P_acpt]
            if len(above) == 1:
                self.positives[t] = above[0]
                out.append(Decision(POSITIVE, t, above[0], self.step))
            else:
                out.append(Decision(DEFERRED, t, None, self.step))
        self.decisions.extend(d for d in out if d.kind != DEFERRED)
        return out

    def finalize(self, track_ids=None) -> dict:
        """track -> sensor id, None (every candidate ruled out) or UNDEFINED."""
        ids = list(self.candidates) if track_ids is None else list(track_ids)
        result = {}
        for t in ids:
            if t in self.positives:
                result[t] = self.positives[t]
            elif t in self.ever_candidates and not self.candidates.get(t):
                result[t] = None
            else:
                result[t] = UNDEFINED
        return result


# --------------------------------------------------------------------------- functional API


def ingest(state: MatchState, score, step: int | None = None) -> MatchState:
    """Feed one CorrespondenceScore (or any object with the same fields)."""
    step = getattr(score, "step", step)
    if step is None:
        step = int(round(score.start_t * 10))
    state.ingest(score.track_id, score.sensor_id, step, score.p, score.r)
    return state


def decide(state: MatchState, config: MatchConfig | None = None) -> list[Decision]:
    if config is not None and config != state.config:
        raise ConfigError("state was built with a different MatchConfig")
    return state.decide(everything=True)


def finalize(state: MatchState, track_ids=None) -> dict:
    return state.finalize(track_ids)


def run_matching(rows, config: MatchConfig, track_ids=None) -> tuple[MatchState, dict]:
    """Ingest ``(step, track_id, sensor_id, p, r)`` rows grouped by step, deciding
    after every step; returns the final state and assignment."""
    state = MatchState(config)
    current = None
    for step, track_id, sensor_id, p, r in rows:
        if current is not None and step != current:
            if step < current:
                raise OrderingError(f"rows not sorted by step ({step} after {current})")
            state.decide()
        current = step
        state.ingest(track_id, sensor_id, step, p, r)
    state.decide()
    return state, state.finalize(track_ids)
