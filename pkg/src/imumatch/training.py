"""Pair construction, weighted binary cross-entropy and the training loop.

Positive pairs couple a labeled track with its wearer's sensor over the same
time span. Negative pairs come from two sources:

* different identity, same time: the track against another participant's sensor;
* same identity, shifted time: the track against its own sensor, offset by a
  multiple of the stride and by at least ``W`` samples.

Both pools are indexed implicitly (counts per track, never materialized), so
negatives are drawn uniformly without replacement even when the pools hold
millions of couplings. Windows are cut from the prepared channels only when a
batch is assembled.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericFailure
from .estimator import Estimator, LogisticEstimator, RunningStats
from .network import Architecture, DualConvAttentionNet
from .signals import FeatureWindow, N_CHANNELS

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
RHO_GRID = (1, 4, 16, 64, 256)
W_GRID = (100, 300, 600)


@dataclass
class TrainConfig:
    W: int = 300
    rho_neg: float = 16.0
    stride_train: int = 10
    stride_val: int = 1
    val_rho: float = 1.0
    neg_mix: float = 0.5  # share of negatives drawn from the different-identity pool
    lr: float = 1e-4
    batch_size: int = 512
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    split_ratio: float = 0.8
    estimator: str = "nn"
    k_short: int = 5
    k_long: int = 25
    maps: int = 16
    attention: int = 32
    hidden: int = 32

    def __post_init__(self):
        ints = ("W", "stride_train", "stride_val", "batch_size", "epochs", "patience",
                "k_short", "k_long", "maps", "attention", "hidden")
        for key in ints:
            val = getattr(self, key)
            if isinstance(val, bool) or int(val) != val or val < 1:
                raise ConfigError(f"{key} must be a positive integer", key)
            setattr(self, key, int(val))
        if self.rho_neg < 1:
            raise ConfigError("rho_neg must be at least 1", "rho_neg")
        if self.val_rho < 1:
            raise ConfigError("val_rho must be at least 1", "val_rho")
        if not self.lr > 0:
            raise ConfigError("lr must be positive", "lr")
        if not 0.0 <= self.neg_mix <= 1.0:
            raise ConfigError("neg_mix must lie in [0, 1]", "neg_mix")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigError("split_ratio must lie in (0, 1]", "split_ratio")
        if self.estimator not in ("nn", "logistic"):
            raise ConfigError("estimator must be 'nn' or 'logistic'", "estimator")
        if self.estimator == "nn" and self.W < self.k_long:
            raise ConfigError("W must be at least k_long", "W")

    def architecture(self) -> Architecture:
        return Architecture(self.W, self.k_short, self.k_long, self.maps, self.attention, self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def new_model(config: TrainConfig) -> Estimator:
    """Untrained estimator of the configured kind with fresh (unfrozen) running stats."""
    if config.estimator == "logistic":
        return LogisticEstimator(config.W, RunningStats())
    return DualConvAttentionNet.initialize(config.architecture(), config.seed, RunningStats())


# --------------------------------------------------------------------------- split


@dataclass
class Split:
    train: object
    val: object
    train_ids: list
    val_ids: list
    warning: str | None = None

    def __iter__(self):
        return iter((self.train, self.val))


def subset(prepared, participant_ids):
    """Labeled tracks and sensors of the given participants only."""
    from .pipeline import PreparedDataset

    ids = set(participant_ids)
    tracks = [t for t in prepared.tracks if t.label is not None and t.label in ids]
    sensors = [s for s in prepared.sensors if s.sensor_id in ids]
    return PreparedDataset(tracks, sensors, prepared.rate,
                           {t.track_id: prepared.durations.get(t.track_id) for t in tracks})


def split_by_individual(prepared, ratio: float = 0.8, seed: int = 0) -> Split:
    """Assign whole participants to training or validation.

    Tracks without a label have no identity to assign and are left out of both.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("split ratio must lie in (0, 1]", "split_ratio")
    labeled = {t.label for t in prepared.tracks if t.label is not None}
    ids = sorted(s.sensor_id for s in prepared.sensors if s.sensor_id in labeled)
    if len(ids) < 2:
        raise DegenerateInputError(f"need at least 2 labeled participants, found {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_train = min(len(ids), max(1, int(round(ratio * len(ids)))))
    train_ids, val_ids = sorted(order[:n_train]), sorted(order[n_train:])
    warning = None
    if not val_ids:
        warning = "validation set is empty; the final epoch will be kept"
        log.warning(warning)
    return Split(subset(prepared, train_ids), subset(prepared, val_ids), train_ids, val_ids, warning)


# --------------------------------------------------------------------------- pairs


@dataclass(frozen=True)
class PairSample:
    window: FeatureWindow
    y: int


@dataclass
class PairSet:
    """Index form of a pair list; ``k_track``/``k_sensor`` are absolute grid indices."""

    dataset: object
    W: int
    track_idx: np.ndarray
    sensor_idx: np.ndarray
    k_track: np.ndarray
    k_sensor: np.ndarray
    y: np.ndarray
    available: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @property
    def n_pos(self) -> int:
        return int(self.y.sum())

    @property
    def n_neg(self) -> int:
        return len(self.y) - self.n_pos

    def _buffers(self):
        # all channels side by side, so a batch is one fancy-indexing gather
        if not hasattr(self, "_buf"):
            tr, se = self.dataset.tracks, self.dataset.sensors
            t_off = np.cumsum([0] + [t.n for t in tr])[:-1] - np.array([t.k0 for t in tr])
            s_off = np.cumsum([0] + [s.n for s in se])[:-1] - np.array([s.k0 for s in se])
            self._buf = (
                np.hstack([t.channels for t in tr]) if tr else np.empty((2, 0)),
                np.hstack([s.channels for s in se]) if se else np.empty((7, 0)),
                t_off.astype(np.int64),
                s_off.astype(np.int64),
            )
        return self._buf

    def batch(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        tbuf, sbuf, t_off, s_off = self._buffers()
        cols = np.arange(self.W)
        a = (t_off[self.track_idx[idx]] + self.k_track[idx])[:, None] + cols
        c = (s_off[self.sensor_idx[idx]] + self.k_sensor[idx])[:, None] + cols
        X = np.empty((len(idx), N_CHANNELS, self.W))
        X[:, :2] = tbuf[:, a].transpose(1, 0, 2)
        X[:, 2:] = sbuf[:, c].transpose(1, 0, 2)
        return X

    def sample(self, i: int) -> PairSample:
        tr = self.dataset.tracks[self.track_idx[i]]
        se = self.dataset.sensors[self.sensor_idx[i]]
        w = FeatureWindow.from_array(tr.track_id, se.sensor_id, self.k_track[i] / tr.rate,
                                     self.batch([i])[0], tr.label)
        return PairSample(w, int(self.y[i]))

    def identities(self) -> set:
        """Participant ids touched by any pair, through the track label or the sensor."""
        ids = {self.dataset.tracks[i].label for i in np.unique(self.track_idx)}
        ids |= {self.dataset.sensors[i].sensor_id for i in np.unique(self.sensor_idx)}
        return ids

    def admissible(self) -> bool:
        """Every negative differs in identity or is shifted by at least ``W`` samples;
        every positive is aligned and same-identity."""
        labels = np.array([t.label for t in self.dataset.tracks], dtype=object)[self.track_idx]
        sensors = np.array([s.sensor_id for s in self.dataset.sensors], dtype=object)[self.sensor_idx]
        same = labels == sensors
        shift = np.abs(self.k_track - self.k_sensor)
        neg = self.y == 0
        pos_ok = np.all(same[~neg] & (shift[~neg] == 0))
        neg_ok = np.all(~same[neg] | (shift[neg] >= self.W))
        return bool(pos_ok and neg_ok)


def _aligned_starts(tr, se, W: int, stride: int) -> np.ndarray:
    k_start = max(tr.k0, se.k0)
    k_end = min(tr.k0 + tr.n, se.k0 + se.n)
    if k_end - k_start < W:
        return np.empty(0, dtype=np.int64)
    return np.arange(k_start, k_end - W + 1, stride, dtype=np.int64)


def _shift_ranges(kt: np.ndarray, se, W: int, stride: int):
    """Valid shift multiples j (sensor start = kt + j*stride, |j*stride| >= W)
    as two ranges per track start: [lo, -jw] and [jw, hi]."""
    jw = -(-W // stride)
    lo = -((kt - se.k0) // stride)
    hi = (se.k0 + se.n - W - kt) // stride
    n_left = np.maximum(0, -jw - lo + 1)
    n_right = np.maximum(0, hi - jw + 1)
    return jw, lo, n_left, n_right


class _Pool:
    """Concatenation of blocks; block b holds ``counts[b]`` items."""

    def __init__(self):
        self.blocks, self.counts = [], []

    def add(self, block, count: int):
        if count > 0:
            self.blocks.append(block)
            self.counts.append(int(count))

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def locate(self, flat: np.ndarray):
        ends = np.cumsum(self.counts)
        b = np.searchsorted(ends, flat, side="right")
        return b, flat - (ends[b] - np.asarray(self.counts)[b])


def _split_quota(target: int, n_a: int, n_b: int, mix: float) -> tuple[int, int]:
    qa = min(n_a, int(round(mix * target)))
    qb = min(n_b, target - qa)
    qa = min(n_a, target - qb)
    return qa, qb


def build_pairs(
    prepared,
    W: int,
    stride: int,
    rho_neg: float,
    seed: int = 0,
    neg_mix: float = 0.5,
) -> PairSet:
    if stride < 1 or W < 1:
        raise ValueError("W and stride must be positive")
    tracks, sensors = prepared.tracks, prepared.sensors
    sidx = {s.sensor_id: i for i, s in enumerate(sensors)}
    rng = np.random.default_rng(seed)

    pos = {k: [] for k in ("t", "s", "k")}
    diff_pool, shift_pool = _Pool(), _Pool()
    for ti, tr in enumerate(tracks):
        if tr.label is None or tr.label not in sidx:
            continue
        own = sidx[tr.label]
        starts = _aligned_starts(tr, sensors[own], W, stride)
        pos["t"].append(np.full(len(starts), ti))
        pos["s"].append(np.full(len(starts), own))
        pos["k"].append(starts)
        for si, se in enumerate(sensors):
            if si != own:
                st = _aligned_starts(tr, se, W, stride)
                diff_pool.add((ti, si, st), len(st))
        kt = np.arange(tr.k0, tr.k0 + tr.n - W + 1, stride, dtype=np.int64)
        if len(kt):
            jw, lo, n_left, n_right = _shift_ranges(kt, sensors[own], W, stride)
            per = n_left + n_right
            shift_pool.add((ti, own, kt, jw, lo, n_left, np.cumsum(per)), per.sum())

    n_pos = int(sum(len(k) for k in pos["k"]))
    if n_pos == 0:
        raise DegenerateInputError("no positive pairs: no labeled track overlaps its sensor by W samples")
    target = min(int(math.floor(rho_neg * n_pos)), diff_pool.total + shift_pool.total)
    qa, qb = _split_quota(target, diff_pool.total, shift_pool.total, neg_mix)

    neg_t, neg_s, neg_kt, neg_ks = [], [], [], []
    if qa:
        flat = np.sort(rng.choice(diff_pool.total, size=qa, replace=False))
        b, off = diff_pool.locate(flat)
        for blk in np.unique(b):
            ti, si, st = diff_pool.blocks[blk]
            k = st[off[b == blk]]
            neg_t.append(np.full(len(k), ti)); neg_s.append(np.full(len(k), si))
            neg_kt.append(k); neg_ks.append(k)
    if qb:
        flat = np.sort(rng.choice(shift_pool.total, size=qb, replace=False))
        b, off = shift_pool.locate(flat)
        for blk in np.unique(b):
            ti, si, kt, jw, lo, n_left, cum = shift_pool.blocks[blk]
            o = off[b == blk]
            w = np.searchsorted(cum, o, side="right")
            within = o - np.concatenate([[0], cum])[w]
            j = np.where(within < n_left[w], lo[w] + within, jw + (within - n_left[w]))
            neg_t.append(np.full(len(o), ti)); neg_s.append(np.full(len(o), si))
            neg_kt.append(kt[w]); neg_ks.append(kt[w] + j * stride)

    cat = lambda parts: np.concatenate(parts).astype(np.int64) if parts else np.empty(0, np.int64)
    pairs = PairSet(
        prepared,
        W,
        cat(pos["t"] + neg_t),
        cat(pos["s"] + neg_s),
        cat(pos["k"] + neg_kt),
        cat(pos["k"] + neg_ks),
        np.concatenate([np.ones(n_pos, np.int8), np.zeros(qa + qb, np.int8)]),
        {"positives": n_pos, "different_identity": diff_pool.total, "shifted_time": shift_pool.total},
    )
    return pairs


def enumerate_negatives(prepared, W: int, stride: int) -> set:
    """Every admissible negative coupling ``(track_idx, sensor_idx, k_track, k_sensor)``,
    by brute force. Only for small datasets."""
    out = set()
    for ti, tr in enumerate(prepared.tracks):
        if tr.label is None:
            continue
        for si, se in enumerate(prepared.sensors):
            if se.sensor_id != tr.label:
                for k in _aligned_starts(tr, se, W, stride):
                    out.add((ti, si, int(k), int(k)))
            else:
                for kt in range(tr.k0, tr.k0 + tr.n - W + 1, stride):
                    for ks in range(kt - stride * ((kt - se.k0) // stride), se.k0 + se.n - W + 1, stride):
                        if abs(ks - kt) >= W:
                            out.add((ti, si, kt, ks))
    return out


# --------------------------------------------------------------------------- loss and optimizer


def weighted_bce(p, y, w_pos: float = 1.0) -> float:
    """Mean of -[w_pos * y * ln p + (1 - y) * ln(1 - p)] with p clamped."""
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    return float(np.mean(-(w_pos * y * np.log(p) + (1 - y) * np.log1p(-p))))


def weighted_bce_grad(p, y, w_pos: float = 1.0) -> np.ndarray:
    """d(mean loss)/dp per sample; zero where the clamp is active."""
    p_raw = np.asarray(p, dtype=float)
    p = np.clip(p_raw, P_CLAMP, 1 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    g = (-w_pos * y / p + (1 - y) / (1 - p)) / len(p)
    return np.where((p_raw < P_CLAMP) | (p_raw > 1 - P_CLAMP), 0.0, g)


class Adam:
    def __init__(self, n: int, lr: float = 1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step = 0

    def update(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "step": self.step}

    @classmethod
    def from_state(cls, state: dict, lr: float) -> "Adam":
        opt = cls(len(state["m"]), lr)
        opt.m, opt.v, opt.step = np.array(state["m"]), np.array(state["v"]), int(state["step"])
        return opt


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Estimator
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    optimizer: dict
    seconds: float = 0.0
    warning: str | None = None


def evaluate_loss(model: Estimator, pairs: PairSet, w_pos: float, batch_size: int = 512,
                  stats: RunningStats | None = None) -> float:
    if not len(pairs):
        return float("nan")
    total = []
    saved = model.stats
    if stats is not None:
        model.stats = stats
    try:
        for i in range(0, len(pairs), batch_size):
            idx = np.arange(i, min(i + batch_size, len(pairs)))
            p = model.predict(pairs.batch(idx))
            total.append(weighted_bce(p, pairs.y[idx], w_pos) * len(idx))
    finally:
        model.stats = saved
    return math.fsum(total) / len(pairs)


def _ratio(pairs: PairSet) -> float:
    return pairs.n_neg / pairs.n_pos if pairs.n_pos else 1.0


def train(
    model: Estimator,
    train_pairs: PairSet,
    val_pairs: PairSet | None,
    config: TrainConfig,
    history: list | None = None,
    optimizer: dict | None = None,
    on_epoch=None,
) -> TrainResult:
    """Fit ``model`` in place; the returned model carries the parameters and
    frozen running stats of the epoch with the lowest validation loss."""
    if not getattr(model, "trainable", False):
        raise ConfigError(f"estimator {model.kind!r} is not trainable", "estimator")
    if model.W != train_pairs.W or (val_pairs is not None and len(val_pairs) and val_pairs.W != model.W):
        raise ConfigError("model W does not match the pairs", "W")
    if not len(train_pairs):
        raise DegenerateInputError("no training pairs")
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    w_pos = _ratio(train_pairs)
    val_w = _ratio(val_pairs) if val_pairs is not None and len(val_pairs) else 1.0
    has_val = val_pairs is not None and len(val_pairs) > 0
    history = list(history or [])
    first_epoch = history[-1][0] + 1 if history else 1

    if model.stats.frozen:
        model.stats = RunningStats(model.stats.mean, model.stats.var, model.stats.momentum)
    opt = Adam.from_state(optimizer, config.lr) if optimizer else Adam(model.n_params, config.lr)
    theta = model.params.copy()
    best = (math.inf, first_epoch - 1, theta.copy(), model.stats.copy())
    stale = 0
    for epoch in range(first_epoch, first_epoch + config.epochs):
        order = rng.permutation(len(train_pairs))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            X, y = train_pairs.batch(idx), train_pairs.y[idx]
            model.stats.update(X)
            p, cache = model.forward_batch(X)
            loss = weighted_bce(p, y, w_pos)
            if not math.isfinite(loss):
                raise NumericFailure(f"training loss diverged at epoch {epoch}")
            grad = model.backward_batch(cache, weighted_bce_grad(p, y, w_pos))
            if not np.all(np.isfinite(grad)):
                raise NumericFailure(f"non-finite gradient at epoch {epoch}")
            theta = opt.update(theta, grad)
            model.params = theta
            losses.append(loss * len(idx))
        train_loss = math.fsum(losses) / len(order)
        val_loss = (
            evaluate_loss(model, val_pairs, val_w, config.batch_size, model.stats.freeze())
            if has_val else float("nan")
        )
        history.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        score = val_loss if has_val else -epoch  # no validation: keep the latest
        if score < best[0]:
            best = (score, epoch, theta.copy(), model.stats.copy())
            stale = 0
        else:
            stale += 1
            if has_val and stale >= config.patience:
                log.info("early stop after epoch %d", epoch)
                break
    _, best_epoch, best_theta, best_stats = best
    model.params = best_theta
    model.stats = best_stats.freeze()
    best_val = next((v for e, _, v in history if e == best_epoch), float("nan"))
    return TrainResult(
        model, history, best_epoch, best_val, opt.state(), time.perf_counter() - t_start,
        None if has_val else "no validation pairs; kept the final epoch",
    )


def fit(prepared, config: TrainConfig, model: Estimator | None = None) -> tuple[TrainResult, Split]:
    """Split by participant, build pairs and train a fresh model."""
    split = split_by_individual(prepared, config.split_ratio, config.seed)
    train_pairs = build_pairs(split.train, config.W, config.stride_train, config.rho_neg,
                              config.seed, config.neg_mix)
    val_pairs = None
    if split.val_ids:
        val_pairs = build_pairs(split.val, config.W, config.stride_val, config.val_rho,
                                config.seed + 1, config.neg_mix)
    log.info("pairs: train %d (+%d), val %d", len(train_pairs), train_pairs.n_pos,
             len(val_pairs) if val_pairs is not None else 0)
    model = model or new_model(config)
    return train(model, train_pairs, val_pairs, config), split


def grid(prepared, config: TrainConfig, Ws=W_GRID, rhos=RHO_GRID) -> list[dict]:
    """Best validation loss for every (W, rho_neg) cell."""
    rows = []
    for W in Ws:
        for rho in rhos:
            cell = TrainConfig(**{**config.to_dict(), "W": W, "rho_neg": rho})
            result, _ = fit(prepared, cell)
            rows.append({"W": W, "rho_neg": rho, "val_loss": result.best_val_loss,
                         "best_epoch": result.best_epoch})
    return rows
