"""Compact dual-kernel convolution + attention-pooling correspondence network.

Graph for one (9, W) window::

    standardize (frozen running stats)
    ├─ conv k_short (valid) ─ tanh ─ centre crop ─┐
    └─ conv k_long  (valid) ─ tanh ───────────────┴─ concat  (T = W - k_long + 1 steps)
    attention scores  s_t = v · tanh(A h_t + a)
    softmax over t, pooled z = sum_t alpha_t h_t
    dense tanh ─ dense ─ sigmoid ─> p

Everything is plain numpy with a hand-written backward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFailure, ShapeError, StateError
from .estimator import Estimator, RunningStats, sigmoid
from .signals import N_CHANNELS, FeatureWindow


@dataclass(frozen=True)
class Architecture:
    W: int
    k_short: int = 5
    k_long: int = 25
    maps: int = 16
    attention: int = 32
    hidden: int = 32
    channels: int = N_CHANNELS

    def __post_init__(self):
        if not 1 <= self.k_short <= self.k_long <= self.W:
            raise ValueError("need 1 <= k_short <= k_long <= W")
        if min(self.maps, self.attention, self.hidden) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def steps(self) -> int:
        return self.W - self.k_long + 1

    @property
    def crop(self) -> int:
        return (self.k_long - self.k_short) // 2

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        F, C, A, H = self.maps, self.channels, self.attention, self.hidden
        return [
            ("conv_short_w", (F, C, self.k_short)),
            ("conv_short_b", (F,)),
            ("conv_long_w", (F, C, self.k_long)),
            ("conv_long_b", (F,)),
            ("attn_w", (A, 2 * F)),
            ("attn_b", (A,)),
            ("attn_v", (A,)),
            ("dense_w", (H, 2 * F)),
            ("dense_b", (H,)),
            ("out_w", (H,)),
            ("out_b", ()),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return asdict(self)


def _im2col(X: np.ndarray, k: int) -> np.ndarray:
    """(B, C, L) -> (B, L - k + 1, C * k)."""
    B, C, L = X.shape
    v = sliding_window_view(X, k, axis=2)  # (B, C, L-k+1, k)
    return v.transpose(0, 2, 1, 3).reshape(B, L - k + 1, C * k)


def _check(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite activations in layer '{name}'")


class ForwardCache:
    __slots__ = ("X", "Xs", "cols1", "cols2", "H1", "H2", "H", "U", "alpha", "z", "D", "p", "version")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


class DualConvAttentionNet(Estimator):
    kind = "nn"
    trainable = True

    def __init__(self, arch: Architecture, stats: RunningStats | None = None, params=None):
        super().__init__(arch.W, stats)
        self.arch = arch
        self._version = 0
        self._last_cache: ForwardCache | None = None
        if params is None:
            self._params = np.zeros(arch.n_params)
        else:
            self.params = params

    # ---------------------------------------------------------------- parameters

    @classmethod
    def initialize(cls, arch: Architecture, seed: int = 0, stats: RunningStats | None = None):
        rng = np.random.default_rng(seed)
        net = cls(arch, stats)
        chunks = []
        for name, shape in arch.layout():
            if name.endswith("_b"):
                chunks.append(np.zeros(shape).ravel())
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            chunks.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).ravel())
        net.params = np.concatenate(chunks)
        return net

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        value = np.array(value, dtype=float)
        if value.shape != (self.arch.n_params,):
            raise ShapeError(f"expected {self.arch.n_params} parameters, got {value.shape}")
        self._params = value
        self._version += 1

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    def unpack(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        theta = self._params if theta is None else theta
        out, i = {}, 0
        for name, shape in self.arch.layout():
            n = int(np.prod(shape))
            out[name] = theta[i : i + n].reshape(shape)
            i += n
        return out

    def descriptor(self) -> dict:
        return self.arch.to_dict()

    def with_params(self, params) -> "DualConvAttentionNet":
        return DualConvAttentionNet(self.arch, self.stats.copy(), params)

    # ---------------------------------------------------------------- forward

    def _trunk(self, Xs: np.ndarray, P: dict, keep_cols: bool = False):
        """Conv paths for standardized input (B, C, L) -> H1, H2 over L - k_long + 1 steps."""
        a = self.arch
        F = a.maps
        steps = Xs.shape[2] - a.k_long + 1
        xs_short = Xs[:, :, a.crop : a.crop + steps + a.k_short - 1]
        cols1, cols2 = _im2col(xs_short, a.k_short), _im2col(Xs, a.k_long)
        H1 = np.tanh(cols1 @ P["conv_short_w"].reshape(F, -1).T + P["conv_short_b"])
        H2 = np.tanh(cols2 @ P["conv_long_w"].reshape(F, -1).T + P["conv_long_b"])
        _check("conv_short", H1)
        _check("conv_long", H2)
        if keep_cols:
            return H1, H2, cols1, cols2
        return H1, H2

    def _head(self, z: np.ndarray, P: dict):
        D = np.tanh(z @ P["dense_w"].T + P["dense_b"])
        _check("dense", D)
        p = sigmoid(D @ P["out_w"] + P["out_b"])
        _check("output", p)
        return D, np.atleast_1d(p)

    def forward_batch(self, X: np.ndarray):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[1] != self.arch.channels:
            raise ShapeError(f"expected (B, {self.arch.channels}, W) input, got {X.shape}")
        self._check_width(X.shape[2])
        _check("input", X)
        P = self.unpack()
        Xs = self.stats.standardize(X)
        H1, H2, cols1, cols2 = self._trunk(Xs, P, keep_cols=True)
        H = np.concatenate([H1, H2], axis=2)
        U = np.tanh(H @ P["attn_w"].T + P["attn_b"])
        s = U @ P["attn_v"]
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        alpha = e / e.sum(axis=1, keepdims=True)
        _check("attention", alpha)
        z = (alpha[:, None, :] @ H)[:, 0]
        D, p = self._head(z, P)
        cache = ForwardCache(
            X=X, Xs=Xs, cols1=cols1, cols2=cols2, H1=H1, H2=H2, H=H, U=U,
            alpha=alpha, z=z, D=D, p=p, version=self._version,
        )
        return p, cache

    def predict(self, X):
        return self.forward_batch(X)[0]

    def forward(self, window: FeatureWindow):
        """Probability for one window plus the cache needed by :meth:`backward`."""
        p, cache = self.forward_batch(window.data[None])
        self._last_cache = cache
        return float(p[0]), cache

    # ---------------------------------------------------------------- backward

    def backward_batch(self, cache: ForwardCache, upstream) -> np.ndarray:
        """Gradient of sum_b upstream_b * p_b with respect to the flat parameters."""
        if cache.version != self._version:
            raise StateError("forward cache was produced with different parameters")
        a = self.arch
        F = a.maps
        P = self.unpack()
        g = np.broadcast_to(np.asarray(upstream, dtype=float), cache.p.shape)

        dlogit = g * cache.p * (1.0 - cache.p)  # (B,)
        grads = {"out_b": np.array(dlogit.sum()), "out_w": cache.D.T @ dlogit}
        dpre = np.outer(dlogit, P["out_w"]) * (1.0 - cache.D**2)  # (B, Hd)
        grads["dense_w"] = dpre.T @ cache.z
        grads["dense_b"] = dpre.sum(axis=0)
        dz = dpre @ P["dense_w"]  # (B, 2F)

        H, alpha, U = cache.H, cache.alpha, cache.U
        dH = alpha[:, :, None] * dz[:, None, :]
        dalpha = (H @ dz[:, :, None])[:, :, 0]
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        B, T, A = U.shape
        grads["attn_v"] = ds.reshape(-1) @ U.reshape(-1, A)
        dpreU = ds[:, :, None] * P["attn_v"] * (1.0 - U**2)  # (B, T, A)
        grads["attn_w"] = dpreU.reshape(-1, A).T @ H.reshape(B * T, -1)
        grads["attn_b"] = dpreU.sum(axis=(0, 1))
        dH = dH + dpreU @ P["attn_w"]

        dA1 = (dH[:, :, :F] * (1.0 - cache.H1**2)).reshape(B * T, F)
        dA2 = (dH[:, :, F:] * (1.0 - cache.H2**2)).reshape(B * T, F)
        cols1 = cache.cols1.reshape(B * T, -1)
        cols2 = cache.cols2.reshape(B * T, -1)
        grads["conv_short_w"] = (dA1.T @ cols1).reshape(F, a.channels, a.k_short)
        grads["conv_short_b"] = dA1.sum(axis=0)
        grads["conv_long_w"] = (dA2.T @ cols2).reshape(F, a.channels, a.k_long)
        grads["conv_long_b"] = dA2.sum(axis=0)

        return np.concatenate([np.ravel(grads[name]) for name, _ in a.layout()])

    def backward(self, window: FeatureWindow, upstream: float = 1.0, cache: ForwardCache | None = None):
        """Exact gradient of ``upstream * p(window)`` with respect to the parameters.

        Uses the cache from the most recent :meth:`forward` unless one is given.
        """
        cache = cache if cache is not None else self._last_cache
        if cache is None:
            raise StateError("backward called before forward")
        if cache.X.shape[0] != 1 or not np.array_equal(cache.X[0], window.data):
            raise StateError("forward cache belongs to a different window")
        return self.backward_batch(cache, upstream)

    # ---------------------------------------------------------------- sequences

    def sequence_probabilities(self, track_id, sensor_id, X, stride=1, batch=256):
        """All stride-spaced windows of a (9, L) pair matrix in one pass.

        Convolutions and attention scores are shared between overlapping windows;
        only the softmax pooling and the dense head are per window.
        """
        X = np.asarray(X, dtype=float)
        a = self.arch
        L = X.shape[1]
        if L < a.W:
            return np.empty(0)
        _check("input", X)
        P = self.unpack()
        Xs = self.stats.standardize(X)[None]
        H1, H2 = self._trunk(Xs, P)
        H = np.concatenate([H1[0], H2[0]], axis=1)  # (L - k_long + 1, 2F)
        s = np.tanh(H @ P["attn_w"].T + P["attn_b"]) @ P["attn_v"]
        z = windowed_softmax_pool(s, H, a.steps)[::stride]
        return self._head(z, P)[1]


def windowed_softmax_pool(s: np.ndarray, H: np.ndarray, T: int) -> np.ndarray:
    """softmax(s[i:i+T]) @ H[i:i+T] for every start i, shape (N - T + 1, D).

    Uses per-block prefix and suffix sums (block length T) so each window is the
    sum of one block suffix and the next block's prefix, with no subtraction.
    """
    N, D = H.shape
    if N < T:
        return np.empty((0, D))
    nb = -(-N // T)
    pad = nb * T - N
    S = np.concatenate([s, np.full(pad, -np.inf)]).reshape(nb, T)
    Hb = np.concatenate([H, np.zeros((pad, D))]).reshape(nb, T, D)
    M = S.max(axis=1)
    E = np.exp(S - M[:, None])
    EH = E[:, :, None] * Hb
    pre_e, pre_h = np.cumsum(E, axis=1), np.cumsum(EH, axis=1)
    suf_e = np.cumsum(E[:, ::-1], axis=1)[:, ::-1]
    suf_h = np.cumsum(EH[:, ::-1], axis=1)[:, ::-1]

    starts = np.arange(N - T + 1)
    b, o = np.divmod(starts, T)
    has_next = o > 0
    bn = np.minimum(b + 1, nb - 1)
    on = np.where(has_next, o - 1, 0)
    m_next = np.where(has_next, M[bn], -np.inf)
    ref = np.maximum(M[b], m_next)
    w_cur = np.exp(M[b] - ref)
    w_next = np.where(has_next, np.exp(m_next - ref), 0.0)
    den = suf_e[b, o] * w_cur + pre_e[bn, on] * w_next
    num = suf_h[b, o] * w_cur[:, None] + pre_h[bn, on] * w_next[:, None]
    return num / den[:, None]


def forward(model: DualConvAttentionNet, window: FeatureWindow):
    return model.forward(window)


def backward(model: DualConvAttentionNet, window: FeatureWindow, upstream: float = 1.0):
    return model.backward(window, upstream)
