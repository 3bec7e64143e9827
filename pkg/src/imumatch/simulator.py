"""Synthetic warehouse scenes: walkers, camera tracks and matching IMU streams.

Each agent follows a semi-Markov motion-state machine (stand, walk, inspect,
backward walk) with goal-directed waypoint walking inside the arena. One latent
motion per agent drives both its camera track and, for participants, its
inertial stream, so a labeled track and its sensor always agree.

Random streams are split per agent and per purpose (motion, IMU, visibility,
camera noise, fragmentation) from one seed, so changing e.g. the position
noise level never changes timestamps or labels.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError
from .signals import SensorRecord, Track

GRAVITY = 9.81
MIN_AREA_PER_AGENT = 4.0  # m^2


class MotionState(enum.IntEnum):
    stand = 0
    walk = 1
    inspect = 2
    backward = 3


# mean bout length (s) of each state
DEFAULT_STATE_MEAN_S = {"stand": 5.0, "walk": 14.0, "inspect": 20.0, "backward": 3.0}
# next-state probabilities, rows sum to 1
DEFAULT_TRANSITIONS = {
    "stand": {"walk": 0.6, "inspect": 0.3, "backward": 0.1},
    "walk": {"stand": 0.4, "inspect": 0.5, "backward": 0.1},
    "inspect": {"stand": 0.3, "walk": 0.6, "backward": 0.1},
    "backward": {"stand": 0.3, "walk": 0.5, "inspect": 0.2},
}


@dataclass
class ScenarioConfig:
    duration_s: float = 600.0
    n_participants: int = 10
    n_nonparticipants: int = 5
    state_mean_s: dict = field(default_factory=lambda: dict(DEFAULT_STATE_MEAN_S))
    transitions: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_TRANSITIONS.items()})
    walk_speed: float = 1.2
    walk_speed_sd: float = 0.15
    walk_speed_jitter: float = 0.25  # relative sd of the slow pace fluctuation
    walk_speed_tau: float = 2.0  # s, correlation time of that fluctuation
    backward_speed: float = 0.5
    max_accel: float = 1.5
    max_turn_rate: float = 2.0
    sigma_pos: float = 0.1
    sensor_rate: float = 50.0
    camera_rate: float = 5.0
    clock_offset_s: float = 0.2
    fragmentation_per_min: float = 0.15
    min_track_s: float = 10.0
    full_presence_fraction: float = 0.7
    nonparticipant_median_s: float = 25.0
    arena: tuple = (29.0, 18.0)
    step_freq: float = 2.0
    step_amp: float = 2.0
    accel_noise: float = 0.1
    gyro_noise: float = 0.01
    inspect_burst_rate: float = 1.0
    inspect_burst_amp: float = 2.5
    tilt_wander_deg: float = 3.0
    sensor_margin_s: float = 1.0
    coordinated_pair: bool = False
    seed: int = 0

    def __post_init__(self):
        self.arena = tuple(float(a) for a in self.arena)
        positive = {
            "duration_s": self.duration_s,
            "walk_speed": self.walk_speed,
            "sensor_rate": self.sensor_rate,
            "camera_rate": self.camera_rate,
            "max_accel": self.max_accel,
            "max_turn_rate": self.max_turn_rate,
            "step_freq": self.step_freq,
            "walk_speed_tau": self.walk_speed_tau,
            "nonparticipant_median_s": self.nonparticipant_median_s,
        }
        for key, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive", key)
        nonneg = {
            "n_nonparticipants": self.n_nonparticipants,
            "sigma_pos": self.sigma_pos,
            "clock_offset_s": self.clock_offset_s,
            "fragmentation_per_min": self.fragmentation_per_min,
            "min_track_s": self.min_track_s,
            "accel_noise": self.accel_noise,
            "gyro_noise": self.gyro_noise,
            "step_amp": self.step_amp,
            "inspect_burst_rate": self.inspect_burst_rate,
            "inspect_burst_amp": self.inspect_burst_amp,
            "tilt_wander_deg": self.tilt_wander_deg,
            "walk_speed_sd": self.walk_speed_sd,
            "walk_speed_jitter": self.walk_speed_jitter,
            "backward_speed": self.backward_speed,
            "sensor_margin_s": self.sensor_margin_s,
        }
        for key, val in nonneg.items():
            if val < 0:
                raise ConfigError(f"{key} must be non-negative", key)
        if self.n_participants < 1:
            raise ConfigError("n_participants must be at least 1", "n_participants")
        if not 0.0 <= self.full_presence_fraction <= 1.0:
            raise ConfigError("full_presence_fraction must lie in [0, 1]", "full_presence_fraction")
        if len(self.arena) != 2 or min(self.arena) <= 2.0:
            raise ConfigError("arena must be two extents larger than 2 m", "arena")
        names = {s.name for s in MotionState}
        for key in self.state_mean_s:
            if key not in names:
                raise ConfigError(f"unknown motion state {key!r}", "state_mean_s")
            if not self.state_mean_s[key] > 0:
                raise ConfigError(f"state_mean_s.{key} must be positive", "state_mean_s")
        for src, row in self.transitions.items():
            if src not in names or any(dst not in names for dst in row):
                raise ConfigError(f"unknown motion state in transitions.{src}", "transitions")
            if any(p < 0 for p in row.values()) or sum(row.values()) <= 0:
                raise ConfigError(f"transitions.{src} must be non-negative with positive sum", "transitions")
        area = self.arena[0] * self.arena[1]
        if area / (self.n_participants + self.n_nonparticipants) < MIN_AREA_PER_AGENT:
            raise ConfigError(
                f"arena {self.arena[0]}x{self.arena[1]} m too small for "
                f"{self.n_participants + self.n_nonparticipants} agents",
                "arena",
            )


@dataclass(frozen=True, eq=False)
class MotionTimeline:
    """Latent continuous motion of one agent, sampled at the sensor rate."""

    agent_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    facing: np.ndarray
    state: np.ndarray

    def at(self, times: np.ndarray):
        """Interpolated (x, y, state) at arbitrary times inside the timeline."""
        x = np.interp(times, self.t, self.x)
        y = np.interp(times, self.t, self.y)
        idx = np.clip(np.searchsorted(self.t, times), 0, len(self.t) - 1)
        return x, y, self.state[idx]


@dataclass
class GroundTruth:
    labels: dict  # track_id -> participant id or None
    states: dict = field(default_factory=dict)  # track_id -> state codes at track samples
    presence: dict = field(default_factory=dict)  # participant id -> (t_start, t_end) in view
    clock_offsets: dict = field(default_factory=dict)  # participant id -> sensor clock offset


@dataclass
class Scenario:
    tracks: list
    sensors: list
    truth: GroundTruth
    timelines: dict
    config: ScenarioConfig


# --------------------------------------------------------------------------- motion


def _state_sequence(cfg: ScenarioConfig, rng, t0: float, t1: float, first=None):
    """Bouts (start, end, state) covering [t0, t1]."""
    names = [s.name for s in MotionState]
    means = {**DEFAULT_STATE_MEAN_S, **cfg.state_mean_s}
    state = first if first is not None else MotionState(rng.choice(4, p=[0.2, 0.4, 0.3, 0.1]))
    bouts, t = [], t0
    while t < t1:
        length = max(1.0, rng.exponential(means[state.name]))
        bouts.append((t, min(t + length, t1), state))
        t += length
        row = cfg.transitions.get(state.name, DEFAULT_TRANSITIONS[state.name])
        nxt = [n for n in names if row.get(n, 0) > 0 and n != state.name]
        probs = np.array([row[n] for n in nxt], dtype=float)
        state = MotionState[nxt[rng.choice(len(nxt), p=probs / probs.sum())]]
    return bouts


def _random_point(rng, arena, margin=1.0):
    return float(rng.uniform(margin, arena[0] - margin)), float(rng.uniform(margin, arena[1] - margin))


def simulate_motion(
    agent_id: str, cfg: ScenarioConfig, rng, t0: float, t1: float, walk_bias: float = 0.0
) -> MotionTimeline:
    """Integrate one agent's kinematics over [t0, t1] at the sensor rate."""
    dt = 1.0 / cfg.sensor_rate
    n = int(math.floor((t1 - t0) * cfg.sensor_rate)) + 1
    t = t0 + np.arange(n) * dt
    bouts = _state_sequence(cfg, rng, t0, t1 + dt)
    if walk_bias > 0:
        bouts = [(a, b, MotionState.walk if rng.random() < walk_bias else s) for a, b, s in bouts]
    state = np.empty(n, dtype=np.int8)
    for a, b, s in bouts:
        state[(t >= a) & (t < b)] = int(s)

    ax, ay = cfg.arena
    lo_x, hi_x, lo_y, hi_y = 0.3, ax - 0.3, 0.3, ay - 0.3
    my_speed = max(0.6, rng.normal(cfg.walk_speed, cfg.walk_speed_sd))
    px, py = _random_point(rng, cfg.arena)
    wx, wy = _random_point(rng, cfg.arena)
    heading = float(rng.uniform(-np.pi, np.pi))
    pace = (1.0 + _smooth_walk(rng, n, dt, cfg.walk_speed_jitter, cfg.walk_speed_tau)).tolist()
    facing = heading
    v = 0.0
    xs, ys, vs, fs = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    max_dv = cfg.max_accel * dt
    max_dh = cfg.max_turn_rate * dt
    walk, backward = int(MotionState.walk), int(MotionState.backward)
    codes = state.tolist()
    for i in range(n):
        s = codes[i]
        if s == walk:
            if math.hypot(wx - px, wy - py) < 1.0:
                wx, wy = _random_point(rng, cfg.arena)
            desired = math.atan2(wy - py, wx - px)
            turn = (desired - heading + math.pi) % (2 * math.pi) - math.pi
            heading += min(max(turn, -max_dh), max_dh)
            facing = heading
            target = max(0.3, my_speed * pace[i])
        elif s == backward:
            heading = facing + math.pi
            target = cfg.backward_speed
        else:
            target = 0.0
        v += min(max(target - v, -max_dv), max_dv)
        nx = px + v * dt * math.cos(heading)
        ny = py + v * dt * math.sin(heading)
        if not (lo_x <= nx <= hi_x and lo_y <= ny <= hi_y):
            # wall: stop and head for a fresh waypoint
            nx, ny = min(max(nx, lo_x), hi_x), min(max(ny, lo_y), hi_y)
            v = 0.0
            wx, wy = _random_point(rng, cfg.arena)
            if s == backward:
                for j in range(i, n):
                    if codes[j] != backward:
                        break
                    codes[j] = int(MotionState.stand)
        px, py = nx, ny
        xs[i], ys[i], vs[i], fs[i] = px, py, v, facing
    state = np.asarray(codes, dtype=np.int8)
    return MotionTimeline(agent_id, t, xs, ys, vs, np.unwrap(fs), state)


def follow(leader: MotionTimeline, agent_id: str, offset=(0.0, 0.8)) -> MotionTimeline:
    """A companion walking beside ``leader`` (coordinated-pair mode)."""
    return MotionTimeline(
        agent_id,
        leader.t.copy(),
        leader.x + offset[0],
        leader.y + offset[1],
        leader.speed.copy(),
        leader.facing.copy(),
        leader.state.copy(),
    )


# --------------------------------------------------------------------------- inertial


def _smooth_walk(rng, n, dt, scale, tau=5.0):
    """Bounded slow wander: first-order low-pass of white noise, unit stationary sd."""
    a = math.exp(-dt / tau)
    w = rng.normal(0.0, math.sqrt(1 - a * a), n)
    out, _ = lfilter([1.0], [1.0, -a], w, zi=[a * rng.normal()])
    return scale * out


def _bursts(rng, t, active, rate, amp):
    """Sporadic Hann-shaped 3-axis bursts while ``active``."""
    out = np.zeros((len(t), 3))
    if rate <= 0 or amp <= 0 or not active.any():
        return out
    dt = t[1] - t[0]
    n_events = rng.poisson(rate * active.sum() * dt)
    starts = rng.choice(np.flatnonzero(active), size=n_events) if n_events else []
    for i0 in starts:
        length = int(rng.uniform(0.5, 1.5) / dt)
        i1 = min(len(t), i0 + length)
        env = np.hanning(length)[: i1 - i0]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.8, 2.0)
        wave = np.sin(2 * np.pi * freq * (t[i0:i1] - t[i0]))
        out[i0:i1] += amp * rng.uniform(0.5, 1.5) * (env * wave)[:, None] * direction
    return out * active[:, None]


def synthesize_imu(
    timeline: MotionTimeline,
    cfg: ScenarioConfig,
    rng=None,
    clock_offset: float = 0.0,
) -> SensorRecord:
    """Forward model from latent motion to accelerometer, gravity and gyroscope.

    Body frame: x forward (facing), y left, z up. Linear acceleration is the
    second derivative of position rotated into the body frame, plus a vertical
    step oscillation (and half-frequency lateral sway) while walking, plus
    burst motion while inspecting, plus white noise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    t = timeline.t
    n = len(t)
    dt = t[1] - t[0]
    vel = np.column_stack([np.gradient(timeline.x, t), np.gradient(timeline.y, t)])
    acc_w = np.column_stack([np.gradient(vel[:, 0], t), np.gradient(vel[:, 1], t)])
    c, s = np.cos(timeline.facing), np.sin(timeline.facing)
    fwd = c * acc_w[:, 0] + s * acc_w[:, 1]
    left = -s * acc_w[:, 0] + c * acc_w[:, 1]

    walking = np.isin(timeline.state, (MotionState.walk, MotionState.backward))
    freq = cfg.step_freq * rng.uniform(0.9, 1.1)
    phase = 2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)
    gait = np.clip(timeline.speed / cfg.walk_speed, 0.0, 1.5) * walking
    vert = cfg.step_amp * gait * np.sin(phase)
    sway = 0.3 * cfg.step_amp * gait * np.sin(phase / 2)
    lin = np.column_stack([fwd, left + sway, vert])

    inspecting = timeline.state == MotionState.inspect
    burst_acc = _bursts(rng, t, inspecting, cfg.inspect_burst_rate, cfg.inspect_burst_amp)
    burst_gyro = _bursts(rng, t, inspecting, cfg.inspect_burst_rate, 0.4 * cfg.inspect_burst_amp)
    lin = lin + burst_acc + rng.normal(0.0, cfg.accel_noise, (n, 3))

    tilt = math.radians(cfg.tilt_wander_deg)
    roll = _smooth_walk(rng, n, dt, tilt) if tilt > 0 else np.zeros(n)
    pitch = _smooth_walk(rng, n, dt, tilt) if tilt > 0 else np.zeros(n)
    gravity = GRAVITY * np.column_stack(
        [-np.sin(pitch), np.sin(roll) * np.cos(pitch), np.cos(roll) * np.cos(pitch)]
    )

    yaw_rate = np.gradient(timeline.facing, t)
    gyro = np.column_stack([np.gradient(roll, t), np.gradient(pitch, t), yaw_rate])
    gyro[:, 0] += 0.15 * cfg.step_amp / 2.0 * gait * np.sin(phase / 2 + 0.5)
    gyro = gyro + burst_gyro + rng.normal(0.0, cfg.gyro_noise, (n, 3))

    return SensorRecord(timeline.agent_id, t + clock_offset, lin + gravity, gravity, gyro)


# --------------------------------------------------------------------------- camera


def fragment_tracks(tracks, rate: float, seed: int = 0) -> list:
    """Split tracks at Poisson cut times (``rate`` per minute).

    Pieces get ids ``<track_id>-<k>`` and keep the label; pieces with fewer than
    2 samples are dropped. A track without cuts keeps its id.
    """
    if rate < 0:
        raise ValueError("fragmentation rate must be non-negative")
    if rate == 0:
        return list(tracks)
    rng = np.random.default_rng(seed)
    out = []
    for tr in tracks:
        n_cuts = rng.poisson(rate / 60.0 * tr.duration)
        cuts = np.sort(rng.uniform(tr.t[0], tr.t[-1], n_cuts))
        if n_cuts == 0:
            out.append(tr)
            continue
        bounds = np.searchsorted(tr.t, cuts)
        pieces = np.split(np.arange(len(tr)), bounds)
        k = 0
        for idx in pieces:
            if len(idx) < 2:
                continue
            out.append(Track(f"{tr.track_id}-{k}", tr.t[idx], tr.x[idx], tr.y[idx], tr.label))
            k += 1
    return out


def _camera_times(cfg: ScenarioConfig, t0: float, t1: float) -> np.ndarray:
    k0 = math.ceil(t0 * cfg.camera_rate - 1e-9)
    k1 = math.floor(t1 * cfg.camera_rate + 1e-9)
    return np.arange(k0, k1 + 1) / cfg.camera_rate


# --------------------------------------------------------------------------- scenes


def _presence(cfg: ScenarioConfig, rng) -> tuple[float, float]:
    D = cfg.duration_s
    if rng.random() < cfg.full_presence_fraction:
        return 0.0, D
    length = rng.uniform(0.3, 0.9) * D
    start = rng.uniform(0.0, D - length)
    return start, start + length


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Tracks, sensor records and ground truth for one synthetic scene."""
    root = np.random.SeedSequence(cfg.seed)
    n_agents = cfg.n_participants + cfg.n_nonparticipants
    streams = [s.spawn(5) for s in root.spawn(n_agents)]
    frag_seed = int(root.generate_state(1)[0])
    D = cfg.duration_s
    margin = cfg.sensor_margin_s + cfg.clock_offset_s

    timelines: dict[str, MotionTimeline] = {}
    sensors, raw_tracks = [], []
    presence, offsets, states = {}, {}, {}
    width = max(2, len(str(cfg.n_participants)))
    for i in range(n_agents):
        motion_rng, imu_rng, vis_rng, noise_rng, _ = (np.random.default_rng(s) for s in streams[i])
        participant = i < cfg.n_participants
        if participant:
            pid = f"P{i + 1:0{width}d}"
            if cfg.coordinated_pair and i == 1:
                tl = follow(timelines[f"P{1:0{width}d}"], pid)
            else:
                tl = simulate_motion(pid, cfg, motion_rng, -margin, D + margin)
            offset = float(vis_rng.uniform(-cfg.clock_offset_s, cfg.clock_offset_s))
            sensors.append(synthesize_imu(tl, cfg, imu_rng, offset))
            start, end = _presence(cfg, vis_rng)
            label = pid
            presence[pid], offsets[pid] = (start, end), offset
        else:
            pid = f"N{i - cfg.n_participants + 1:0{width}d}"
            length = min(D, vis_rng.lognormal(math.log(cfg.nonparticipant_median_s), 0.8))
            length = max(length, 2.0 / cfg.camera_rate)
            start = vis_rng.uniform(0.0, D - length)
            end = start + length
            tl = simulate_motion(pid, cfg, motion_rng, start - 1.0, end + 1.0, walk_bias=0.6)
            label = None
        timelines[pid] = tl
        times = _camera_times(cfg, start, end)
        if len(times) < 2:
            continue
        x, y, st = tl.at(times)
        noise = noise_rng.normal(size=(len(times), 2)) * cfg.sigma_pos
        raw_tracks.append((Track(f"T{i + 1:03d}", times, x + noise[:, 0], y + noise[:, 1], label), tl))

    pieces = fragment_tracks([tr for tr, _ in raw_tracks], cfg.fragmentation_per_min, frag_seed)
    by_root = {tr.track_id: tl for tr, tl in raw_tracks}
    tracks, labels = [], {}
    for tr in pieces:
        if tr.duration < cfg.min_track_s:
            continue
        tracks.append(tr)
        labels[tr.track_id] = tr.label
        states[tr.track_id] = by_root[tr.track_id.split("-")[0]].at(tr.t)[2]
    truth = GroundTruth(labels, states, presence, offsets)
    return Scenario(tracks, sensors, truth, timelines, cfg)
