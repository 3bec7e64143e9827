"""Dataset handling and the score -> match -> evaluate chain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .errors import DataFormatError
from .estimator import Estimator, RunningStats, reliability_from_variances, rolling_variance
from .matching import MatchConfig, run_matching
from .metrics import MetricReport, evaluate, outcomes_from
from .signals import (
    DEFAULT_RATE,
    LIN_ACCEL,
    SENSOR_SIGMA,
    TRACK_SIGMA,
    N_CHANNELS,
    PreparedSensor,
    PreparedTrack,
    pair_matrix,
    preprocess_sensor,
    preprocess_track,
    window_offsets,
)

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    tracks: list
    sensors: list
    truth: dict | None = None  # track_id -> participant id or None

    @classmethod
    def from_scenario(cls, scenario) -> "Dataset":
        return cls(list(scenario.tracks), list(scenario.sensors), dict(scenario.truth.labels))

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        truth = io.read_truth(d / "truth.csv") if (d / "truth.csv").exists() else None
        return cls(io.read_tracks(d / "tracks.csv"), io.read_sensors(d / "sensors.csv"), truth)

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        paths = [io.write_tracks(self.tracks, d / "tracks.csv"), io.write_sensors(self.sensors, d / "sensors.csv")]
        if self.truth is not None:
            paths.append(io.write_truth(self.truth, d / "truth.csv"))
        return paths

    def labels(self) -> dict:
        """Ground truth if present, otherwise the labels carried by the tracks."""
        if self.truth is not None:
            return dict(self.truth)
        return {tr.track_id: tr.label for tr in self.tracks}

    @property
    def participants(self) -> list[str]:
        return [s.participant_id for s in self.sensors]

    def durations(self) -> dict:
        return {tr.track_id: tr.duration for tr in self.tracks}


@dataclass
class PreparedDataset:
    tracks: list  # PreparedTrack
    sensors: list  # PreparedSensor
    rate: float = DEFAULT_RATE
    durations: dict = field(default_factory=dict)

    def track(self, track_id: str) -> PreparedTrack:
        return self._tracks_by_id[track_id]

    def sensor(self, sensor_id: str) -> PreparedSensor:
        return self._sensors_by_id[sensor_id]

    def __post_init__(self):
        self._tracks_by_id = {t.track_id: t for t in self.tracks}
        self._sensors_by_id = {s.sensor_id: s for s in self.sensors}

    def channel_stats(self) -> RunningStats:
        """Exact population mean/variance per channel over every prepared sample."""
        mean, var = np.zeros(N_CHANNELS), np.ones(N_CHANNELS)
        if self.tracks:
            cat = np.hstack([t.channels for t in self.tracks])
            mean[:2], var[:2] = cat.mean(axis=1), cat.var(axis=1)
        if self.sensors:
            cat = np.hstack([s.channels for s in self.sensors])
            mean[2:], var[2:] = cat.mean(axis=1), cat.var(axis=1)
        return RunningStats(mean, var, frozen=True)


def prepare(
    dataset: Dataset,
    rate: float = DEFAULT_RATE,
    track_sigma: float = TRACK_SIGMA,
    sensor_sigma: float = SENSOR_SIGMA,
) -> PreparedDataset:
    tracks, skipped = [], []
    labels = dataset.labels()
    for tr in dataset.tracks:
        if len(tr) < 3 or tr.duration < 2.0 / rate:
            skipped.append(tr.track_id)
            continue
        pt = preprocess_track(tr, rate, track_sigma)
        if pt.label != labels.get(tr.track_id, pt.label):
            pt = PreparedTrack(pt.track_id, labels[tr.track_id], pt.rate, pt.k0, pt.channels)
        tracks.append(pt)
    if skipped:
        log.info("skipped %d tracks too short to preprocess", len(skipped))
    sensors = [preprocess_sensor(rec, rate, sensor_sigma) for rec in dataset.sensors]
    return PreparedDataset(tracks, sensors, rate, dataset.durations())


# --------------------------------------------------------------------------- scoring


def count_windows(prepared: PreparedDataset, W: int, stride: int = 1) -> int:
    total = 0
    for tr in prepared.tracks:
        for se in prepared.sensors:
            _, X = pair_matrix(tr, se)
            total += len(window_offsets(X.shape[1], W, stride))
    return total


def score_pairs(
    prepared: PreparedDataset,
    model: Estimator,
    stride: int = 1,
    stats: RunningStats | None = None,
) -> pd.DataFrame:
    """Probability and reliability for every window of every (track, sensor) pair.

    ``step`` is the absolute grid index of the window start, so steps are
    comparable across pairs. Rows are sorted by (step, track_id, sensor_id).
    """
    W = model.W
    stats = stats if stats is not None else model.stats
    if not stats.frozen:
        raise ValueError("scoring needs frozen running statistics")
    spd_var = {t.track_id: rolling_variance(t.channels[0], W) for t in prepared.tracks}
    acc_var = {s.sensor_id: rolling_variance(s.channels[LIN_ACCEL - 2], W) for s in prepared.sensors}
    cols = {c: [] for c in ("step", "track_id", "sensor_id", "p", "r")}
    for tr in prepared.tracks:
        for se in prepared.sensors:
            k_start, X = pair_matrix(tr, se)
            offs = window_offsets(X.shape[1], W, stride)
            if not len(offs):
                continue
            p = model.sequence_probabilities(tr.track_id, se.sensor_id, X, stride=stride)
            a, b = k_start - tr.k0, k_start - se.k0
            r = reliability_from_variances(spd_var[tr.track_id][a + offs], acc_var[se.sensor_id][b + offs], stats)
            n = len(offs)
            cols["step"].append(k_start + offs)
            cols["track_id"].append(np.full(n, tr.track_id, dtype=object))
            cols["sensor_id"].append(np.full(n, se.sensor_id, dtype=object))
            cols["p"].append(np.asarray(p, dtype=float))
            cols["r"].append(np.asarray(r, dtype=float))
    if not cols["step"]:
        return pd.DataFrame({c: pd.Series(dtype=object if c in ("track_id", "sensor_id") else float)
                             for c in io.SCORE_COLUMNS}).astype({"step": np.int64})
    df = pd.DataFrame({c: np.concatenate(v) for c, v in cols.items()})
    df["step"] = df["step"].astype(np.int64)
    return df.sort_values(["step", "track_id", "sensor_id"], kind="stable", ignore_index=True)


# --------------------------------------------------------------------------- matching and evaluation


@dataclass
class MatchResult:
    assignment: dict
    decisions: list
    report: MetricReport | None


def match_scores(scores: pd.DataFrame, config: MatchConfig, track_ids) -> tuple:
    df = scores.sort_values(["step", "track_id", "sensor_id"], kind="stable")
    rows = zip(df["step"].tolist(), df["track_id"].tolist(), df["sensor_id"].tolist(),
               df["p"].tolist(), df["r"].tolist())
    return run_matching(rows, config, track_ids)


def match_and_evaluate(
    scores: pd.DataFrame,
    config: MatchConfig,
    truth: dict | None,
    participants,
    durations: dict | None = None,
    track_ids=None,
) -> MatchResult:
    if truth is not None:
        unknown = set(scores["track_id"]) - set(truth)
        if unknown:
            raise DataFormatError(f"scores mention tracks missing from truth: {sorted(unknown)[:5]}")
        track_ids = list(truth) if track_ids is None else track_ids
    state, assignment = match_scores(scores, config, track_ids)
    report = None
    if truth is not None:
        report = evaluate(outcomes_from(assignment, truth, durations), participants)
    return MatchResult(assignment, state.decisions, report)


def run_scene(
    dataset: Dataset,
    model: Estimator,
    config: MatchConfig,
    stride: int = 1,
    prepared: PreparedDataset | None = None,
) -> tuple[pd.DataFrame, MatchResult]:
    prepared = prepared or prepare(dataset)
    scores = score_pairs(prepared, model, stride)
    truth = dataset.labels()
    result = match_and_evaluate(scores, config, truth, dataset.participants, dataset.durations())
    return scores, result
