"""Scenes, cross-dataset standardization, synthetic generation, and masking.

All scene coordinates are in the target agent's frame at the present step:
the target sits at the origin heading along +x. Windows are placed on a
unified grid at ``target_rate_hz``; slots without a native sample are padded
with (0, 0) and marked invalid. Nothing is interpolated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class AgentTrack:
    history: np.ndarray        # (H, 2)
    future: np.ndarray         # (T, 2)
    history_valid: np.ndarray  # (H,) bool
    future_valid: np.ndarray   # (T,) bool
    category: int = 0


@dataclass
class LanePolyline:
    points: np.ndarray       # (P, 2)
    point_valid: np.ndarray  # (P,) bool
    category: int = 0


@dataclass
class Scene:
    agents: list
    lanes: list
    dataset_tag: str = "synthetic"
    sample_rate_hz: float = 10.0
    scene_id: int = 0

    def __post_init__(self):
        if not self.agents or not self.lanes:
            raise DataError("a scene needs at least one agent and one lane")

    @property
    def target(self) -> AgentTrack:
        return self.agents[0]


@dataclass
class RawTrack:
    """Native-rate samples of one agent; ``timestamps`` are seconds, present = 0."""

    timestamps: np.ndarray
    positions: np.ndarray
    native_rate_hz: float
    native_history_len: int
    native_future_len: int

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(self.timestamps) != len(self.positions):
            raise DataError("timestamps and positions differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")


def _rate_ratio(native: float, target: float) -> int:
    ratio = target / native
    k = round(ratio)
    if k < 1 or abs(ratio - k) > 1e-9:
        raise DataError(f"native rate {native} Hz does not divide target rate {target} Hz")
    return k


def standardize(raw: RawTrack, target_rate_hz: float, H: int, T: int):
    """Place native samples on the unified grid.

    History slot ``i`` holds time ``-(H-1-i)/rate``; future slot ``j`` holds
    ``(j+1)/rate``. Returns ``(history, future, history_valid, future_valid)``.
    """
    if H <= 0 or T <= 0:
        raise ConfigError("H and T must be positive")
    if len(raw.timestamps) == 0:
        raise DataError("empty raw track")
    _rate_ratio(raw.native_rate_hz, target_rate_hz)
    native_lo = -(raw.native_history_len - 1) / raw.native_rate_hz
    native_hi = raw.native_future_len / raw.native_rate_hz
    history = np.zeros((H, 2), dtype=np.float32)
    future = np.zeros((T, 2), dtype=np.float32)
    hv = np.zeros(H, dtype=bool)
    fv = np.zeros(T, dtype=bool)
    tol = 1e-6
    for t, pos in zip(raw.timestamps, raw.positions):
        if t < native_lo - tol or t > native_hi + tol:
            continue
        steps = t * target_rate_hz
        k = round(steps)
        if abs(steps - k) > 1e-6:
            raise DataError(f"sample at t={t:.6f}s is off the {target_rate_hz} Hz grid "
                            f"(native rate {raw.native_rate_hz} Hz)")
        if k <= 0:
            slot = H - 1 + k
            if slot >= 0:
                history[slot] = pos
                hv[slot] = True
        else:
            slot = k - 1
            if slot < T:
                future[slot] = pos
                fv[slot] = True
    return history, future, hv, fv


def to_raw(history, future, history_valid, future_valid, rate_hz: float) -> RawTrack:
    """Inverse view of a standardized window as a native-rate raw track."""
    H, T = len(history), len(future)
    times, pos = [], []
    for i in np.flatnonzero(history_valid):
        times.append(-(H - 1 - i) / rate_hz)
        pos.append(history[i])
    for j in np.flatnonzero(future_valid):
        times.append((j + 1) / rate_hz)
        pos.append(future[j])
    return RawTrack(np.array(times), np.array(pos).reshape(-1, 2), rate_hz, H, T)


# -- synthetic generation -----------------------------------------------------
@dataclass
class SceneProfile:
    """Generator settings for one synthetic "dataset"."""

    name: str = "desk"
    rate_hz: float = 10.0
    H_native: int = 10
    T_native: int = 12
    n_agents_range: tuple = (2, 6)
    n_lanes_range: tuple = (6, 10)
    H: int = 10
    T: int = 12
    P: int = 20
    target_rate_hz: float = 10.0
    speed_range: tuple = (4.0, 12.0)
    noise_sigma: float = 0.05
    lane_change_prob: float = 0.2
    lane_change_width: float = 3.5
    lane_change_duration: float = 3.0
    partial_prob: float = 0.3
    segment_length: float = 20.0
    max_curvature: float = 0.03
    lane_offset: float = 3.5

    def __post_init__(self):
        self.n_agents_range = tuple(self.n_agents_range)
        self.n_lanes_range = tuple(self.n_lanes_range)
        self.speed_range = tuple(self.speed_range)
        for rng_name in ("n_agents_range", "n_lanes_range"):
            lo, hi = getattr(self, rng_name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{rng_name} must be a nonempty range of positive ints")
        _rate_ratio(self.rate_hz, self.target_rate_hz)

    @property
    def max_speed(self) -> float:
        """Upper bound on any agent's noise-free speed (m/s)."""
        offset = self.lane_offset + self.lane_change_width
        lateral = 1.5 * self.lane_change_width / self.lane_change_duration
        return self.speed_range[1] * 1.05 * (1 + self.max_curvature * offset) + lateral

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneProfile":
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SceneProfile":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad profile file {path}: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def desk_profile(**overrides) -> SceneProfile:
    return SceneProfile(**overrides)


def av2_like_profile(**overrides) -> SceneProfile:
    """5 s history / 6 s future at 10 Hz on the full unified window."""
    base = dict(name="av2-like", rate_hz=10.0, H_native=50, T_native=60, H=50, T=60)
    return SceneProfile(**{**base, **overrides})


def av1_like_profile(**overrides) -> SceneProfile:
    """2 s history / 3 s future at 10 Hz, padded into the 5 s / 6 s window."""
    base = dict(name="av1-like", rate_hz=10.0, H_native=20, T_native=30, H=50, T=60)
    return SceneProfile(**{**base, **overrides})


def nu_like_profile(**overrides) -> SceneProfile:
    """2 s history / 6 s future at 2 Hz, padded onto the 10 Hz grid."""
    base = dict(name="nu-like", rate_hz=2.0, H_native=4, T_native=12, H=50, T=60)
    return SceneProfile(**{**base, **overrides})


PROFILES = {"desk": desk_profile, "av2-like": av2_like_profile,
            "av1-like": av1_like_profile, "nu-like": nu_like_profile}


@dataclass
class _Road:
    origin: np.ndarray
    heading: float
    curvature: float

    def center(self, s):
        s = np.asarray(s, dtype=np.float64)
        k = self.curvature
        if abs(k) < 1e-9:
            x = s * math.cos(self.heading)
            y = s * math.sin(self.heading)
        else:
            x = (np.sin(self.heading + k * s) - math.sin(self.heading)) / k
            y = (math.cos(self.heading) - np.cos(self.heading + k * s)) / k
        return np.stack([x, y], axis=-1) + self.origin

    def normal(self, s):
        th = self.heading + self.curvature * np.asarray(s, dtype=np.float64)
        return np.stack([-np.sin(th), np.cos(th)], axis=-1)

    def point(self, s, offset):
        return self.center(s) + np.asarray(offset)[..., None] * self.normal(s)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _clipped_noise(rng, sigma, n):
    noise = rng.normal(0.0, sigma, size=(n, 2))
    norm = np.linalg.norm(noise, axis=1, keepdims=True)
    scale = np.minimum(1.0, (2 * sigma) / np.maximum(norm, 1e-12))
    return noise * scale


def _generate_scene(rng: np.random.Generator, profile: SceneProfile, scene_id: int) -> Scene:
    p = profile
    n_agents = int(rng.integers(p.n_agents_range[0], p.n_agents_range[1] + 1))
    n_lanes = int(rng.integers(p.n_lanes_range[0], p.n_lanes_range[1] + 1))

    def random_curvature():
        if rng.random() < 0.5:
            return 0.0
        return float(rng.choice([-1, 1]) * rng.uniform(0.005, p.max_curvature))

    roads = [_Road(np.zeros(2), float(rng.uniform(-math.pi, math.pi)), random_curvature())]
    for _ in range(int(rng.integers(0, 3))):
        roads.append(_Road(rng.uniform(-40, 40, size=2) + roads[0].center(100.0),
                           float(rng.uniform(-math.pi, math.pi)), random_curvature()))
    offsets = (0.0, p.lane_offset)

    times = np.arange(-(p.H_native - 1), p.T_native + 1) / p.rate_hz
    present = p.H_native - 1

    def simulate(road: _Road, lane_off: float, s_now: float):
        v0 = rng.uniform(*p.speed_range)
        omega = rng.uniform(0.2, 1.0)
        phi = rng.uniform(0, 2 * math.pi)
        s = s_now + v0 * times - 0.05 * v0 / omega * (np.cos(omega * times + phi) - math.cos(phi))
        lateral = np.zeros_like(times)
        if rng.random() < p.lane_change_prob:
            start = rng.uniform(times[0], times[-1])
            sign = -1.0 if lane_off > 0 else 1.0
            lateral = sign * p.lane_change_width * _smoothstep((times - start) / p.lane_change_duration)
        clean = road.point(s, lane_off + lateral)
        return clean, clean + _clipped_noise(rng, p.noise_sigma, len(times))

    tracks = []
    target_road = roads[0]
    s_target = rng.uniform(60.0, 140.0)
    clean, noisy = simulate(target_road, offsets[int(rng.integers(0, 2))], s_target)
    tracks.append((noisy, np.ones(len(times), dtype=bool)))
    frame_origin = noisy[present].copy()
    dvec = clean[present] - clean[present - 1] if present > 0 else clean[present + 1] - clean[present]
    theta = math.atan2(dvec[1], dvec[0])

    for _ in range(n_agents - 1):
        road = roads[int(rng.integers(0, len(roads)))]
        off = offsets[int(rng.integers(0, 2))]
        if road is target_road:
            s_now = s_target + rng.uniform(-40, 40)
        else:
            s_now = rng.uniform(60.0, 140.0)
        _, noisy_i = simulate(road, off, s_now)
        keep = np.ones(len(times), dtype=bool)
        if rng.random() < p.partial_prob:
            keep[: int(rng.integers(0, present + 1))] = False
        if rng.random() < p.partial_prob:
            keep[len(times) - int(rng.integers(0, p.T_native)):] = False
        keep[present] = True
        tracks.append((noisy_i, keep))

    rot = np.array([[math.cos(-theta), -math.sin(-theta)], [math.sin(-theta), math.cos(-theta)]])

    def to_frame(xy):
        return (np.asarray(xy) - frame_origin) @ rot.T

    agents = []
    for i, (pos, keep) in enumerate(tracks):
        raw = RawTrack(times[keep], to_frame(pos[keep]), p.rate_hz, p.H_native, p.T_native)
        h, f, hv, fv = standardize(raw, p.target_rate_hz, p.H, p.T)
        agents.append(AgentTrack(h, f, hv, fv, category=0 if i == 0 else int(rng.integers(0, 3))))

    # lane segments from every road and offset, nearest to the target's present position
    candidates = []
    for road in roads:
        for off in offsets:
            n_seg = int(200.0 // p.segment_length)
            for k in range(n_seg):
                s0 = k * p.segment_length
                pts = road.point(np.linspace(s0, s0 + p.segment_length, p.P), np.full(p.P, off))
                local = to_frame(pts)
                dist = float(np.linalg.norm(local.mean(axis=0)))
                candidates.append((dist, local))
    candidates.sort(key=lambda c: c[0])
    lanes = []
    for _, local in candidates[:n_lanes]:
        valid = np.ones(p.P, dtype=bool)
        if rng.random() < 0.2:
            valid[int(rng.integers(p.P // 2, p.P)):] = False
        pts = np.where(valid[:, None], local, 0.0).astype(np.float32)
        lanes.append(LanePolyline(pts, valid, category=int(rng.integers(0, 2))))

    return Scene(agents, lanes, dataset_tag=p.name, sample_rate_hz=p.target_rate_hz,
                 scene_id=scene_id)


def generate_synthetic(seed: int, n_scenes: int, profile: SceneProfile | None = None,
                       workers: int = 1) -> list[Scene]:
    """Deterministic list of already-standardized synthetic scenes.

    Scene ``i`` draws from its own generator seeded with ``(seed, i)``, so the
    output does not depend on ``workers``.
    """
    profile = profile or SceneProfile()

    def make(i):
        return _generate_scene(np.random.default_rng([seed, i]), profile, i)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(make, range(n_scenes)))
    return [make(i) for i in range(n_scenes)]


# -- masking -------------------------------------------------------------------
@dataclass
class MaskPlan:
    """Per-token masked flags for one scene."""

    history_masked: np.ndarray  # (N,) bool
    lane_masked: np.ndarray     # (M,) bool

    @property
    def future_masked(self) -> np.ndarray:
        return ~self.history_masked


def complementary_mask(scene: Scene, mask_ratio_agents: float = 0.5, mask_ratio_lanes: float = 0.5,
                       rng: np.random.Generator | None = None) -> MaskPlan:
    """Mask exactly one of history/future per agent and a fraction of lanes.

    ``mask_ratio_agents`` is the probability that an agent's history (rather
    than its future) is the masked half.
    """
    for r in (mask_ratio_agents, mask_ratio_lanes):
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"mask ratio {r} outside [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    n, m = len(scene.agents), len(scene.lanes)
    history_masked = rng.random(n) < mask_ratio_agents
    lane_masked = np.zeros(m, dtype=bool)
    n_mask = int(round(mask_ratio_lanes * m))
    if n_mask:
        lane_masked[rng.permutation(m)[:n_mask]] = True
    return MaskPlan(history_masked, lane_masked)


# -- batching ------------------------------------------------------------------
@dataclass
class SceneBatch:
    """Scenes padded to a common agent/lane count."""

    history: np.ndarray            # (B, A, H, 2)
    history_valid: np.ndarray      # (B, A, H)
    future: np.ndarray             # (B, A, T, 2)
    future_valid: np.ndarray       # (B, A, T)
    agent_valid: np.ndarray        # (B, A)
    lanes: np.ndarray              # (B, M, P, 2)
    lane_point_valid: np.ndarray   # (B, M, P)
    lane_valid: np.ndarray         # (B, M)
    agent_ref: np.ndarray          # (B, A, 2) last observed position
    lane_centroid: np.ndarray      # (B, M, 2)
    scene_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.history.shape[0]


def agent_reference(history, history_valid, future, future_valid) -> np.ndarray:
    """Last valid history position, else first valid future position, else origin."""
    if history_valid.any():
        return history[np.flatnonzero(history_valid)[-1]]
    if future_valid.any():
        return future[np.flatnonzero(future_valid)[0]]
    return np.zeros(2, dtype=np.float32)


def collate(scenes: list[Scene]) -> SceneBatch:
    if not scenes:
        raise DataError("cannot collate an empty scene list")
    H = len(scenes[0].agents[0].history)
    T = len(scenes[0].agents[0].future)
    P = len(scenes[0].lanes[0].points)
    B = len(scenes)
    A = max(len(s.agents) for s in scenes)
    M = max(len(s.lanes) for s in scenes)
    f32 = np.float32
    out = SceneBatch(
        history=np.zeros((B, A, H, 2), f32), history_valid=np.zeros((B, A, H), bool),
        future=np.zeros((B, A, T, 2), f32), future_valid=np.zeros((B, A, T), bool),
        agent_valid=np.zeros((B, A), bool),
        lanes=np.zeros((B, M, P, 2), f32), lane_point_valid=np.zeros((B, M, P), bool),
        lane_valid=np.zeros((B, M), bool),
        agent_ref=np.zeros((B, A, 2), f32), lane_centroid=np.zeros((B, M, 2), f32),
        scene_ids=np.array([s.scene_id for s in scenes], dtype=np.int64),
    )
    for b, s in enumerate(scenes):
        for a, ag in enumerate(s.agents):
            if len(ag.history) != H or len(ag.future) != T:
                raise DataError("scenes in one batch must share window lengths")
            out.history[b, a] = ag.history
            out.history_valid[b, a] = ag.history_valid
            out.future[b, a] = ag.future
            out.future_valid[b, a] = ag.future_valid
            out.agent_valid[b, a] = True
            out.agent_ref[b, a] = agent_reference(ag.history, ag.history_valid, ag.future, ag.future_valid)
        for m, ln in enumerate(s.lanes):
            if len(ln.points) != P:
                raise DataError("scenes in one batch must share lane point counts")
            out.lanes[b, m] = ln.points
            out.lane_point_valid[b, m] = ln.point_valid
            out.lane_valid[b, m] = bool(ln.point_valid.any())
            if ln.point_valid.any():
                out.lane_centroid[b, m] = ln.points[ln.point_valid].mean(axis=0)
    return out


def collate_plans(plans: list[MaskPlan], batch: SceneBatch) -> tuple[np.ndarray, np.ndarray]:
    """Pad per-scene plans to ``(B, A)`` history-masked and ``(B, M)`` lane-masked flags."""
    B, A = batch.agent_valid.shape
    M = batch.lane_valid.shape[1]
    hist = np.zeros((B, A), bool)
    lanes = np.zeros((B, M), bool)
    for b, plan in enumerate(plans):
        hist[b, : len(plan.history_masked)] = plan.history_masked
        lanes[b, : len(plan.lane_masked)] = plan.lane_masked
    return hist, lanes
