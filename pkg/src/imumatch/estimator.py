"""Correspondence probability and activity-based reliability.

An estimator maps a 9-channel window to a probability ``p`` that the tracked
subject is the sensor wearer. Reliability ``r`` is computed separately from the
window's speed and linear-acceleration variances against frozen running
variances, and is never trained.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFailure, ShapeError, StateError
from .signals import LIN_ACCEL, N_CHANNELS, SPEED, FeatureWindow

VAR_EPS = 1e-12
BN_EPS = 1e-5


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass
class RunningStats:
    """Per-channel running mean and variance (exponential moving average).

    Updated from training batches, then frozen; frozen stats are immutable.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))
    var: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))
    momentum: float = 0.1
    frozen: bool = False

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=float)
        self.var = np.array(self.var, dtype=float)
        if self.mean.shape != (N_CHANNELS,) or self.var.shape != (N_CHANNELS,):
            raise ShapeError(f"running stats need {N_CHANNELS} channels")
        if self.frozen:
            self.var = np.maximum(self.var, VAR_EPS)
            self.mean.flags.writeable = False
            self.var.flags.writeable = False

    def update(self, batch: np.ndarray) -> None:
        """Blend batch statistics of ``batch`` (B, 9, W) into the running values."""
        if self.frozen:
            raise StateError("running stats are frozen")
        batch = np.asarray(batch, dtype=float)
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * batch.mean(axis=(0, 2))
        self.var = (1 - m) * self.var + m * batch.var(axis=(0, 2))

    def freeze(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum, frozen=True)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum, self.frozen)

    @classmethod
    def from_arrays(cls, arrays, momentum: float = 0.1) -> "RunningStats":
        """Exact pooled population statistics over (9, L) arrays, frozen."""
        arrays = [np.asarray(a, dtype=float) for a in arrays if np.asarray(a).shape[-1]]
        if not arrays:
            raise ValueError("no data to compute statistics from")
        cat = np.concatenate(arrays, axis=1)
        return cls(cat.mean(axis=1), cat.var(axis=1), momentum, frozen=True)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        """(x - mean) / sqrt(var + eps) along the channel axis (axis -2)."""
        scale = 1.0 / np.sqrt(self.var + BN_EPS)
        return (X - self.mean[:, None]) * scale[:, None]

    def __eq__(self, other):
        if not isinstance(other, RunningStats):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.var, other.var)
            and self.momentum == other.momentum
            and self.frozen == other.frozen
        )


# --------------------------------------------------------------------------- reliability


def reliability_from_variances(var_spd, var_acc, stats: RunningStats):
    """sigmoid(max(log(var_spd / run_var_spd), log(var_acc / run_var_acc)))."""
    vs = np.maximum(np.asarray(var_spd, dtype=float), VAR_EPS)
    va = np.maximum(np.asarray(var_acc, dtype=float), VAR_EPS)
    rs = max(float(stats.var[SPEED]), VAR_EPS)
    ra = max(float(stats.var[LIN_ACCEL]), VAR_EPS)
    return sigmoid(np.maximum(np.log(vs / rs), np.log(va / ra)))


def reliability(window: FeatureWindow, stats: RunningStats) -> float:
    """Activity-based reliability of one window.

    0 when both the track speed and the linear acceleration are flat compared
    with their typical (running) variance, towards 1 when either is active.
    """
    if not stats.frozen:
        raise StateError("reliability needs frozen running stats")
    return float(
        reliability_from_variances(
            np.var(window.trajectory[0]), np.var(window.sensor[0]), stats
        )
    )


def rolling_variance(x: np.ndarray, W: int) -> np.ndarray:
    """Population variance of every length-W window (stride 1)."""
    x = np.asarray(x, dtype=float)
    if len(x) < W:
        return np.empty(0)
    return sliding_window_view(x, W).var(axis=1)


# --------------------------------------------------------------------------- estimators


@dataclass(frozen=True)
class CorrespondenceScore:
    p: float
    r: float
    start_t: float
    track_id: str
    sensor_id: str

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.r <= 1.0):
            raise ValueError(f"score out of range: p={self.p}, r={self.r}")


class Estimator:
    """Common surface of all correspondence estimators.

    Subclasses implement :meth:`predict`, mapping a (B, 9, W) batch to B
    probabilities. Trainable estimators additionally expose a flat ``params``
    vector plus ``forward_batch``/``backward_batch``.
    """

    kind = "base"
    trainable = False

    def __init__(self, W: int, stats: RunningStats | None = None):
        self.W = int(W)
        self.stats = stats if stats is not None else RunningStats()

    def predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_width(self, width: int):
        if width != self.W:
            raise ShapeError(f"window length {width} != model W {self.W}")

    def predict_window(self, window: FeatureWindow) -> float:
        self._check_width(window.W)
        return float(self.predict(window.data[None])[0])

    def sequence_probabilities(
        self, track_id: str, sensor_id: str, X: np.ndarray, stride: int = 1, batch: int = 256
    ) -> np.ndarray:
        """Probabilities for every window of an aligned (9, L) pair matrix."""
        if X.shape[1] < self.W:
            return np.empty(0)
        views = sliding_window_view(X, self.W, axis=1)[:, ::stride].transpose(1, 0, 2)
        out = [self.predict(np.ascontiguousarray(views[i : i + batch])) for i in range(0, len(views), batch)]
        return np.concatenate(out)


def estimate(window: FeatureWindow, model: Estimator) -> CorrespondenceScore:
    """Probability from ``model`` and reliability from its frozen stats."""
    p = model.predict_window(window)
    r = reliability(window, model.stats)
    return CorrespondenceScore(p, r, window.start_t, window.track_id, window.sensor_id)


def oracle_estimate(window: FeatureWindow, truth: dict) -> float:
    """1.0 if the window's track belongs to the window's sensor wearer, else 0.0."""
    label = truth[window.track_id]
    return 1.0 if label is not None and label == window.sensor_id else 0.0


class OracleEstimator(Estimator):
    """Ground-truth estimator used to test the matching and metrics layers."""

    kind = "oracle"

    def __init__(self, truth: dict, W: int, stats: RunningStats | None = None):
        super().__init__(W, stats)
        self.truth = dict(truth)

    def predict(self, X):
        raise TypeError("oracle estimator needs identities; use predict_window")

    def predict_window(self, window):
        self._check_width(window.W)
        return oracle_estimate(window, self.truth)

    def sequence_probabilities(self, track_id, sensor_id, X, stride=1, batch=256):
        label = self.truth[track_id]
        n = 0 if X.shape[1] < self.W else len(range(0, X.shape[1] - self.W + 1, stride))
        return np.full(n, 1.0 if label is not None and label == sensor_id else 0.0)


# --------------------------------------------------------------------------- logistic

FEATURE_NAMES = (
    "corr_speed_accel",
    "corr_turn_gyro",
    "corr_absturn_absgyro",
    "activity_product",
    "activity_gap",
    "turn_gyro_gap",
)


def _corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    num = (a * b).sum(axis=-1)
    den = np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1)) + 1e-9
    return num / den


def window_features(X: np.ndarray, stats: RunningStats) -> np.ndarray:
    """Hand-built cross-modal features of a (B, 9, W) batch, shape (B, 6)."""
    X = np.asarray(X, dtype=float)
    Z = stats.standardize(X)
    spd, turn, acc, gz = X[:, 0], X[:, 1], X[:, 2], X[:, 8]
    z_spd = Z[:, 0].mean(axis=-1)
    z_acc = Z[:, 2].mean(axis=-1)
    z_turn = np.abs(Z[:, 1]).mean(axis=-1)
    z_gz = np.abs(Z[:, 8]).mean(axis=-1)
    return np.column_stack(
        [
            _corr(spd, acc),
            _corr(turn, gz),
            _corr(np.abs(turn), np.abs(gz)),
            np.tanh(z_spd) * np.tanh(z_acc),
            np.abs(np.tanh(z_spd) - np.tanh(z_acc)),
            np.abs(np.tanh(z_turn) - np.tanh(z_gz)),
        ]
    )


class LogisticEstimator(Estimator):
    """Logistic regression on :func:`window_features`."""

    kind = "logistic"
    trainable = True

    def __init__(self, W: int, stats: RunningStats | None = None, params=None):
        super().__init__(W, stats)
        n = len(FEATURE_NAMES) + 1
        self.params = np.zeros(n) if params is None else np.asarray(params, dtype=float).copy()
        if self.params.shape != (n,):
            raise ShapeError(f"logistic estimator expects {n} parameters")

    @property
    def n_params(self) -> int:
        return self.params.size

    def forward_batch(self, X):
        self._check_width(X.shape[-1])
        phi = window_features(X, self.stats)
        p = sigmoid(phi @ self.params[:-1] + self.params[-1])
        if not np.all(np.isfinite(p)):
            raise NumericFailure("non-finite output in layer 'logistic'")
        return p, (phi, p)

    def backward_batch(self, cache, upstream):
        phi, p = cache
        dlogit = np.asarray(upstream, dtype=float) * p * (1 - p)
        return np.concatenate([dlogit @ phi, [dlogit.sum()]])

    def predict(self, X):
        return self.forward_batch(X)[0]

    def descriptor(self) -> dict:
        return {"W": self.W, "features": list(FEATURE_NAMES)}

    def with_params(self, params) -> "LogisticEstimator":
        return LogisticEstimator(self.W, self.stats.copy(), params)


def replace_stats(model: Estimator, stats: RunningStats) -> Estimator:
    """Copy of ``model`` with its own parameter array and the given stats."""
    clone = copy.copy(model)
    clone.stats = stats
    if hasattr(model, "params"):
        clone.params = model.params.copy()
    return clone


__all__ = [
    "CorrespondenceScore",
    "Estimator",
    "LogisticEstimator",
    "OracleEstimator",
    "RunningStats",
    "estimate",
    "oracle_estimate",
    "reliability",
    "reliability_from_variances",
    "replace_stats",
    "rolling_variance",
    "sigmoid",
    "window_features",
]
