"""CSV readers and writers for the stage files.

All writers use a fixed float format and ``\\n`` line endings so identical
inputs produce identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataFormatError
from .signals import SensorRecord, Track
from .undefined import UNDEFINED

FLOAT_FORMAT = "%.10g"

TRACK_COLUMNS = ["track_id", "t", "x", "y", "label"]
SENSOR_COLUMNS = ["participant_id", "t", "ax", "ay", "az", "gx", "gy", "gz", "wx", "wy", "wz"]
TRUTH_COLUMNS = ["track_id", "participant_id"]
SCORE_COLUMNS = ["step", "track_id", "sensor_id", "p", "r"]
DECISION_COLUMNS = ["step", "kind", "track_id", "sensor_id"]
METRIC_COLUMNS = ["metric", "value", "weighted"]
LOSS_COLUMNS = ["epoch", "train_loss", "val_loss"]


def _write(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")
    return path


def _read(path, columns, id_columns, numeric) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path, dtype={c: str for c in id_columns}, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError(f"{path}: empty file") from exc
    if list(df.columns) != columns:
        raise DataFormatError(f"{path}: expected header {','.join(columns)}, got {','.join(map(str, df.columns))}")
    for c in numeric:
        try:
            df[c] = pd.to_numeric(df[c], errors="raise").astype(float)
        except (ValueError, TypeError) as exc:
            raise DataFormatError(f"{path}: column {c} is not numeric") from exc
        if not np.isfinite(df[c].to_numpy()).all():
            raise DataFormatError(f"{path}: column {c} has non-finite values")
    return df


def _groups(df: pd.DataFrame, key: str):
    for name, g in df.groupby(key, sort=False):
        yield name, g


# --------------------------------------------------------------------------- tracks and sensors


def write_tracks(tracks, path) -> Path:
    frames = [
        pd.DataFrame({"track_id": tr.track_id, "t": tr.t, "x": tr.x, "y": tr.y, "label": tr.label or ""})
        for tr in tracks
    ]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=TRACK_COLUMNS)
    return _write(df[TRACK_COLUMNS], path)


def read_tracks(path) -> list[Track]:
    df = _read(path, TRACK_COLUMNS, ["track_id", "label"], ["t", "x", "y"])
    out = []
    for tid, g in _groups(df, "track_id"):
        labels = set(g["label"])
        if len(labels) != 1:
            raise DataFormatError(f"{path}: track {tid} carries several labels")
        label = labels.pop() or None
        try:
            out.append(Track(tid, g["t"].to_numpy(), g["x"].to_numpy(), g["y"].to_numpy(), label))
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
    return out


def write_sensors(records, path) -> Path:
    frames = []
    for rec in records:
        block = np.column_stack([rec.t, rec.accel, rec.gravity, rec.gyro])
        df = pd.DataFrame(block, columns=SENSOR_COLUMNS[1:])
        df.insert(0, "participant_id", rec.participant_id)
        frames.append(df)
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SENSOR_COLUMNS)
    return _write(df, path)


def read_sensors(path) -> list[SensorRecord]:
    df = _read(path, SENSOR_COLUMNS, ["participant_id"], SENSOR_COLUMNS[1:])
    out = []
    for pid, g in _groups(df, "participant_id"):
        a = g[SENSOR_COLUMNS[1:]].to_numpy()
        try:
            out.append(SensorRecord(pid, a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7:10]))
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
    return out


def write_truth(labels: dict, path) -> Path:
    df = pd.DataFrame({"track_id": list(labels), "participant_id": [v or "" for v in labels.values()]})
    return _write(df, path)


def read_truth(path) -> dict:
    df = _read(path, TRUTH_COLUMNS, TRUTH_COLUMNS, [])
    if df["track_id"].duplicated().any():
        raise DataFormatError(f"{path}: duplicate track_id")
    return {t: (p or None) for t, p in zip(df["track_id"], df["participant_id"])}


# --------------------------------------------------------------------------- scores and results


def write_scores(scores: pd.DataFrame, path) -> Path:
    return _write(scores[SCORE_COLUMNS], path)


def read_scores(path) -> pd.DataFrame:
    df = _read(path, SCORE_COLUMNS, ["track_id", "sensor_id"], ["step", "p", "r"])
    if len(df):
        if not np.array_equal(df["step"], np.round(df["step"])):
            raise DataFormatError(f"{path}: step must be an integer")
        for c in ("p", "r"):
            if df[c].min() < 0 or df[c].max() > 1:
                raise DataFormatError(f"{path}: column {c} outside [0, 1]")
    df["step"] = df["step"].astype(np.int64)
    return df


def write_decisions(decisions, path) -> Path:
    rows = [(d.step, d.kind, d.track_id, d.sensor_id or "") for d in decisions]
    return _write(pd.DataFrame(rows, columns=DECISION_COLUMNS), path)


def _fmt(value) -> str:
    if value is UNDEFINED:
        return "undefined"
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)


def write_metrics(report, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for metric, value, weighted in report.rows():
            w.writerow([metric, _fmt(value), weighted])
    return path


def read_metrics(path) -> dict:
    """``{(metric, weighted): value}``; undefined values come back as UNDEFINED."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            v = row["value"]
            value = UNDEFINED if v == "undefined" else float(v)
            w = row["weighted"]
            out[(row["metric"], int(w) if w else None)] = value
    return out


def write_loss_history(history, path) -> Path:
    df = pd.DataFrame(list(history), columns=LOSS_COLUMNS)
    df["epoch"] = df["epoch"].astype(int)
    return _write(df, path)


def read_loss_history(path) -> list[tuple]:
    df = _read(path, LOSS_COLUMNS, [], ["epoch", "train_loss"])
    val = pd.to_numeric(df["val_loss"].replace("", np.nan), errors="coerce")
    return [(int(e), float(a), float(b)) for e, a, b in zip(df["epoch"], df["train_loss"], val)]
