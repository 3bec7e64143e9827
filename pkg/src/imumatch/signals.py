"""Trajectory and inertial channel derivation, smoothing, resampling and windowing.

Every function here is pure. Channel layout of a feature window is fixed::

    0 speed            (m/s, from the track)
    1 turn_rate        (rad/s, from the track)
    2 lin_accel_norm   (m/s^2, |accel - gravity|)
    3-5 accel_x/y/z    (m/s^2, raw accelerometer incl. gravity)
    6-8 gyro_x/y/z     (rad/s)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

DEFAULT_RATE = 10.0
TRACK_SIGMA = 0.5
SENSOR_SIGMA = 0.2
DISPLACEMENT_FLOOR = 0.01
GRAVITY_BAND = (8.0, 11.0)
_TIME_TOL = 1e-9
# grid snapping slack; np.interp clamps the sub-microsecond overhang
_GRID_TOL = 1e-6


class Channel(str, enum.Enum):
    speed = "speed"
    turn_rate = "turn_rate"
    lin_accel_norm = "lin_accel_norm"
    accel_x = "accel_x"
    accel_y = "accel_y"
    accel_z = "accel_z"
    gyro_x = "gyro_x"
    gyro_y = "gyro_y"
    gyro_z = "gyro_z"


CHANNELS: tuple[Channel, ...] = tuple(Channel)
TRAJECTORY_CHANNELS = CHANNELS[:2]
SENSOR_CHANNELS = CHANNELS[2:]
N_CHANNELS = len(CHANNELS)
SPEED = 0
LIN_ACCEL = 2


def _strictly_increasing(t: np.ndarray) -> bool:
    return bool(np.all(np.diff(t) > 0))


@dataclass(frozen=True, eq=False)
class Track:
    """A 2-D world-coordinate trajectory of one visually tracked subject."""

    track_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    label: str | None = None

    def __post_init__(self):
        for name in ("t", "x", "y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.t.ndim == self.x.ndim == self.y.ndim == 1):
            raise ValueError("track arrays must be 1-D")
        if not (len(self.t) == len(self.x) == len(self.y)):
            raise ValueError(f"track {self.track_id}: t/x/y lengths differ")
        if len(self.t) < 2:
            raise DegenerateInputError(f"track {self.track_id} has fewer than 2 samples")
        if not _strictly_increasing(self.t):
            raise ValueError(f"track {self.track_id}: timestamps not strictly increasing")

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


@dataclass(frozen=True, eq=False)
class SensorRecord:
    """Inertial streams from one participant's wearable device."""

    participant_id: str
    t: np.ndarray
    accel: np.ndarray
    gravity: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        n = len(self.t)
        for name in ("accel", "gravity", "gyro"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, 3):
                raise ValueError(f"sensor {self.participant_id}: {name} must have shape ({n}, 3)")
            object.__setattr__(self, name, arr)
        if n < 2:
            raise DegenerateInputError(f"sensor {self.participant_id} has fewer than 2 samples")
        if not _strictly_increasing(self.t):
            raise ValueError(f"sensor {self.participant_id}: timestamps not strictly increasing")
        gnorm = np.linalg.norm(self.gravity, axis=1)
        lo, hi = GRAVITY_BAND
        if np.any((gnorm < lo) | (gnorm > hi)):
            raise ValueError(
                f"sensor {self.participant_id}: gravity norm outside [{lo}, {hi}] m/s^2"
            )

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True, eq=False)
class ChannelSeries:
    channel: Channel
    t: np.ndarray
    values: np.ndarray
    rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.t.shape != self.values.shape or self.t.ndim != 1:
            raise ValueError("ChannelSeries t and values must be 1-D of equal length")

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True, eq=False)
class FeatureWindow:
    """One W-sample, 9-channel slice pairing a track with a sensor."""

    track_id: str
    sensor_id: str
    start_t: float
    trajectory: np.ndarray
    sensor: np.ndarray
    label: str | None = field(default=None, compare=False)

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=float)
        sens = np.asarray(self.sensor, dtype=float)
        if traj.ndim != 2 or traj.shape[0] != 2:
            raise ValueError("trajectory channels must have shape (2, W)")
        if sens.ndim != 2 or sens.shape[0] != 7:
            raise ValueError("sensor channels must have shape (7, W)")
        if traj.shape[1] != sens.shape[1]:
            raise ValueError("trajectory and sensor channels differ in length")
        object.__setattr__(self, "trajectory", traj)
        object.__setattr__(self, "sensor", sens)

    @property
    def W(self) -> int:
        return self.trajectory.shape[1]

    @property
    def data(self) -> np.ndarray:
        """All nine channels stacked, shape (9, W)."""
        return np.vstack([self.trajectory, self.sensor])

    @classmethod
    def from_array(cls, track_id, sensor_id, start_t, data, label=None) -> "FeatureWindow":
        data = np.asarray(data, dtype=float)
        return cls(track_id, sensor_id, float(start_t), data[:2], data[2:], label)


# --------------------------------------------------------------------------- derivation


def derive_speed(track: Track) -> ChannelSeries:
    if len(track) < 2:
        raise DegenerateInputError("speed needs at least 2 samples")
    t, xy = track.t, track.xy
    speed = np.empty(len(t))
    # one-sided at the ends, central inside
    speed[0] = np.linalg.norm(xy[1] - xy[0]) / (t[1] - t[0])
    speed[-1] = np.linalg.norm(xy[-1] - xy[-2]) / (t[-1] - t[-2])
    if len(t) > 2:
        speed[1:-1] = np.linalg.norm(xy[2:] - xy[:-2], axis=1) / (t[2:] - t[:-2])
    return ChannelSeries(Channel.speed, t, speed)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def derive_turn_rate(track: Track, floor: float = DISPLACEMENT_FLOOR) -> ChannelSeries:
    """Signed heading change per second.

    Headings come from consecutive displacement vectors. A sample whose adjacent
    displacements are shorter than ``floor`` gets a turn rate of 0.
    """
    if len(track) < 3:
        raise DegenerateInputError("turn rate needs at least 3 samples")
    t = track.t
    d = np.diff(track.xy, axis=0)
    seg_len = np.hypot(d[:, 0], d[:, 1])
    heading = np.arctan2(d[:, 1], d[:, 0])
    valid = seg_len >= floor

    inner = wrap_angle(heading[1:] - heading[:-1]) / ((t[2:] - t[:-2]) / 2.0)
    inner = np.where(valid[1:] & valid[:-1], inner, 0.0)
    rate = np.empty(len(t))
    rate[1:-1] = inner
    rate[0] = inner[0]
    rate[-1] = inner[-1]
    return ChannelSeries(Channel.turn_rate, t, rate)


def derive_lin_accel_norm(record: SensorRecord) -> ChannelSeries:
    values = np.linalg.norm(record.accel - record.gravity, axis=1)
    return ChannelSeries(Channel.lin_accel_norm, record.t, values)


# --------------------------------------------------------------------------- filtering


def gaussian_filter_times(t: np.ndarray, values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing on (possibly irregular) timestamps.

    The kernel is evaluated on actual time differences, truncated at 3 sigma and
    renormalised per output sample, so edges are not reflected or zero-padded.
    ``values`` may be 1-D or (n, d).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    n = len(t)
    if n == 0:
        raise DegenerateInputError("cannot smooth an empty series")
    radius = 3.0 * sigma + _TIME_TOL
    lo = np.searchsorted(t, t - radius, side="left")
    hi = np.searchsorted(t, t + radius, side="right")
    reach = int(max(np.max(np.arange(n) - lo), np.max(hi - 1 - np.arange(n))))

    acc = np.zeros_like(v)
    norm = np.zeros(n)
    idx = np.arange(n)
    for off in range(-reach, reach + 1):
        j = idx + off
        ok = (j >= 0) & (j < n)
        i_ok, j_ok = idx[ok], j[ok]
        dt = t[j_ok] - t[i_ok]
        w = np.exp(-0.5 * (dt / sigma) ** 2) * (np.abs(dt) <= radius)
        norm[i_ok] += w
        if v.ndim == 1:
            acc[i_ok] += w * v[j_ok]
        else:
            acc[i_ok] += w[:, None] * v[j_ok]
    return acc / (norm if v.ndim == 1 else norm[:, None])


def gaussian_smooth(series: ChannelSeries, sigma: float) -> ChannelSeries:
    if len(series) == 0:
        raise DegenerateInputError("cannot smooth an empty series")
    smoothed = gaussian_filter_times(series.t, series.values, sigma)
    return ChannelSeries(series.channel, series.t, smoothed, series.rate)


def uniform_grid(t0: float, t_end: float, rate: float) -> np.ndarray:
    n = int(math.floor((t_end - t0) * rate + _TIME_TOL)) + 1
    return t0 + np.arange(n) / rate


def resample(series: ChannelSeries, rate: float, start: float | None = None) -> ChannelSeries:
    """Linear interpolation onto a uniform grid of ``rate`` Hz.

    The grid starts at ``start`` (default: the first timestamp) and never runs
    past the last timestamp.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    t = series.t
    if len(t) < 2 or t[-1] - t[0] < 2.0 / rate - _TIME_TOL:
        raise DegenerateInputError(
            f"series spans {t[-1] - t[0] if len(t) else 0:.3f} s, need >= {2.0 / rate:.3f} s"
        )
    t0 = t[0] if start is None else float(start)
    if t0 < t[0] - _GRID_TOL:
        raise ValueError("resampling start precedes the series (no extrapolation)")
    grid = uniform_grid(t0, t[-1], rate)
    if len(grid) == 0:
        raise DegenerateInputError("resampling grid is empty")
    return ChannelSeries(series.channel, grid, np.interp(grid, t, series.values), rate)


# --------------------------------------------------------------------------- prepared streams


def _first_grid_index(t0: float, rate: float) -> int:
    return int(math.ceil(t0 * rate - _GRID_TOL * rate))


@dataclass(frozen=True, eq=False)
class PreparedTrack:
    """Track channels on the shared absolute grid ``t_k = k / rate``."""

    track_id: str
    label: str | None
    rate: float
    k0: int
    channels: np.ndarray  # (2, n): speed, turn_rate

    @property
    def n(self) -> int:
        return self.channels.shape[1]

    @property
    def t(self) -> np.ndarray:
        return (self.k0 + np.arange(self.n)) / self.rate


@dataclass(frozen=True, eq=False)
class PreparedSensor:
    sensor_id: str
    rate: float
    k0: int
    channels: np.ndarray  # (7, n)

    @property
    def n(self) -> int:
        return self.channels.shape[1]

    @property
    def t(self) -> np.ndarray:
        return (self.k0 + np.arange(self.n)) / self.rate


def preprocess_track(
    track: Track,
    rate: float = DEFAULT_RATE,
    sigma: float = TRACK_SIGMA,
    floor: float = DISPLACEMENT_FLOOR,
) -> PreparedTrack:
    """Smooth positions, derive speed and turn rate, resample onto the shared grid."""
    xy = gaussian_filter_times(track.t, track.xy, sigma)
    smooth = Track(track.track_id, track.t, xy[:, 0], xy[:, 1], track.label)
    k0 = _first_grid_index(track.t[0], rate)
    start = k0 / rate
    speed = resample(derive_speed(smooth), rate, start)
    turn = resample(derive_turn_rate(smooth, floor), rate, start)
    return PreparedTrack(track.track_id, track.label, rate, k0, np.vstack([speed.values, turn.values]))


def preprocess_sensor(
    record: SensorRecord, rate: float = DEFAULT_RATE, sigma: float = SENSOR_SIGMA
) -> PreparedSensor:
    """Derive the linear-acceleration norm from raw samples, smooth all seven
    sensor channels and resample them onto the shared grid."""
    raw = np.column_stack(
        [derive_lin_accel_norm(record).values, record.accel, record.gyro]
    )
    smooth = gaussian_filter_times(record.t, raw, sigma)
    k0 = _first_grid_index(record.t[0], rate)
    start = k0 / rate
    rows = [
        resample(ChannelSeries(ch, record.t, smooth[:, i]), rate, start).values
        for i, ch in enumerate(SENSOR_CHANNELS)
    ]
    return PreparedSensor(record.participant_id, rate, k0, np.vstack(rows))


def pair_matrix(track: PreparedTrack, sensor: PreparedSensor) -> tuple[int, np.ndarray]:
    """Aligned 9-channel matrix over the temporal intersection.

    Returns ``(k_start, X)`` where ``X`` has shape (9, L) and column ``j`` sits at
    grid time ``(k_start + j) / rate``. ``L`` is 0 when the streams do not overlap.
    """
    if not math.isclose(track.rate, sensor.rate):
        raise ValueError("track and sensor are on different grids")
    k_start = max(track.k0, sensor.k0)
    k_end = min(track.k0 + track.n, sensor.k0 + sensor.n)
    L = max(0, k_end - k_start)
    X = np.empty((N_CHANNELS, L))
    if L:
        X[:2] = track.channels[:, k_start - track.k0 : k_end - track.k0]
        X[2:] = sensor.channels[:, k_start - sensor.k0 : k_end - sensor.k0]
    return k_start, X


def window_offsets(length: int, W: int, stride: int) -> np.ndarray:
    if W < 1 or stride < 1:
        raise ValueError("W and stride must be positive")
    if length < W:
        return np.empty(0, dtype=int)
    return np.arange(0, length - W + 1, stride)


def make_windows(
    track: PreparedTrack, sensor: PreparedSensor, W: int, stride: int = 1
) -> list[FeatureWindow]:
    """All full windows inside the temporal intersection, ``stride`` samples apart.

    Returns an empty list when the overlap is shorter than ``W``.
    """
    k_start, X = pair_matrix(track, sensor)
    rate = track.rate
    return [
        FeatureWindow.from_array(
            track.track_id, sensor.sensor_id, (k_start + s) / rate, X[:, s : s + W], track.label
        )
        for s in window_offsets(X.shape[1], W, stride)
    ]
