"""Synthetic press-and-perturb contact data.

A clipped-paraboloid elastic contact plus a linear viscous normal term. The
rendered tactile image is a function of the instantaneous deformation
(depth, shear, yaw, tilt) only, while the wrench also depends on the depth
rate, so single-frame force inference has an irreducible error.

All lengths are meters, forces newtons, angles radians unless a name says
otherwise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .data import FRAME_DT, GRID, IMAGE_SIZE, TACTILE_HZ, Episode, Normalization, resample_to_tactile_rate

PAD = 20e-3
TAXEL_PITCH = PAD / GRID
TAXEL_AREA = TAXEL_PITCH**2
PIXEL_PITCH = PAD / IMAGE_SIZE
RAW_HZ = 300.0
SHEAR_SCALE = 1e-3  # tanh saturation length
TILT_ARM = 10e-3  # contact-center offset per unit sin(tilt)
TWIST_GAIN = 50.0  # tz per (yaw rate x contact area)
MARKER_SPAN = 7e-3
MARKER_INTENSITY = 0.3
GEL_DRAG = 1.0  # image footprint displacement per unit shear

_taxel_c = (np.arange(GRID) + 0.5) * TAXEL_PITCH - PAD / 2
TAXEL_X, TAXEL_Y = np.meshgrid(_taxel_c, _taxel_c, indexing="xy")
_pix_c = (np.arange(IMAGE_SIZE) + 0.5) * PIXEL_PITCH - PAD / 2
PIX_X, PIX_Y = np.meshgrid(_pix_c, _pix_c, indexing="xy")


@dataclass(frozen=True)
class Indenter:
    id: str
    shape: str  # sphere | flat | ridge
    size: float  # sphere/ridge radius, flat half-width
    stiffness: float  # Pa/m
    damping: float  # N s/m
    friction: float
    ridge_half_length: float = 5e-3

    def __post_init__(self):
        if self.shape not in ("sphere", "flat", "ridge"):
            raise ValueError(f"unknown indenter shape {self.shape!r}")
        if self.stiffness <= 0 or self.damping < 0 or self.size <= 0:
            raise ValueError("stiffness and size must be positive, damping non-negative")
        if not 0 <= self.friction <= 2:
            raise ValueError("friction must lie in [0, 2]")


@dataclass(frozen=True)
class SensorVariant:
    id: str
    marker_grid: tuple[int, int] | None
    marker_radius_px: float
    gain: float  # image intensity per meter of indentation
    field_mask: np.ndarray = field(default_factory=lambda: np.ones((GRID, GRID), dtype=bool))

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.field_mask.shape != (GRID, GRID):
            raise ValueError("field mask must be 12x12")
        if self.marker_grid is not None and MARKER_SPAN + 2 * self.marker_radius_px * PIXEL_PITCH >= PAD / 2:
            raise ValueError("marker grid does not fit inside the image")

    def marker_positions(self) -> np.ndarray:
        """Rest positions (n_markers, 2) in pad coordinates."""
        if self.marker_grid is None:
            return np.zeros((0, 2))
        rows, cols = self.marker_grid
        ys = np.linspace(-MARKER_SPAN, MARKER_SPAN, rows)
        xs = np.linspace(-MARKER_SPAN, MARKER_SPAN, cols)
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class TrajectoryConfig:
    duration: float = 4.0
    depth_offset: float = 0.8e-3
    z_amplitude: float = 0.35e-3
    z_frequency: float = 1.0
    depth_noise: float = 0.03e-3  # amplitude of each smooth-noise component
    noise_frequencies: tuple[float, ...] = (2.3, 3.7)
    shear_std: float = 0.7e-3
    shear_limit: float = 2e-3
    tilt_limit_deg: float = 15.0
    tilt_std_deg: float = 8.0
    yaw_limit_deg: float = 25.0
    yaw_std_deg: float = 12.0
    smoothing_s: float = 0.08
    raw_hz: float = RAW_HZ
    seed: int = 0

    def __post_init__(self):
        if self.tilt_limit_deg > 15.0:
            raise ValueError("roll/pitch limits may not exceed 15 degrees")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class ContactState:
    d: float = 0.0
    d_dot: float = 0.0
    s: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0
    yaw_rate: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0


@dataclass
class ContactTrajectory:
    """Contact states sampled on a time grid, one array per state field."""

    t: np.ndarray
    d: np.ndarray
    d_dot: np.ndarray
    s: np.ndarray  # (T, 2)
    yaw: np.ndarray
    yaw_rate: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[tuple[float, ContactState]]:
        for i in range(len(self)):
            yield float(self.t[i]), self.state(i)

    def state(self, i: int) -> ContactState:
        return ContactState(float(self.d[i]), float(self.d_dot[i]), tuple(map(float, self.s[i])),
                            float(self.yaw[i]), float(self.yaw_rate[i]),
                            float(self.roll[i]), float(self.pitch[i]))

    @classmethod
    def from_states(cls, states: Sequence[ContactState], t=None) -> "ContactTrajectory":
        t = np.zeros(len(states)) if t is None else np.asarray(t, dtype=np.float64)
        col = lambda name: np.array([getattr(st, name) for st in states], dtype=np.float64)
        return cls(t, col("d"), col("d_dot"), np.array([st.s for st in states], dtype=np.float64).reshape(-1, 2),
                   col("yaw"), col("yaw_rate"), col("roll"), col("pitch"))

    def interpolate(self, times) -> "ContactTrajectory":
        f = lambda v: resample_to_tactile_rate(self.t, v, times)
        return ContactTrajectory(np.asarray(times, dtype=np.float64), f(self.d), f(self.d_dot), f(self.s),
                                 f(self.yaw), f(self.yaw_rate), f(self.roll), f(self.pitch))


def _smooth_walk(rng, n, dt, std, limit, smoothing_s):
    # mean-reverting walk, low-pass filtered, then clipped
    theta = 1.5
    x = np.zeros(n)
    xi = rng.standard_normal(n)
    sig = std * np.sqrt(2 * theta)
    x[0] = std * xi[0]
    for i in range(1, n):
        x[i] = x[i - 1] * (1 - theta * dt) + sig * np.sqrt(dt) * xi[i]
    if smoothing_s > 0:
        x = gaussian_filter1d(x, smoothing_s / dt, mode="nearest")
    return np.clip(x, -limit, limit)


def press_and_perturb_trajectory(cfg: TrajectoryConfig) -> ContactTrajectory:
    """Depth oscillation under Z modulation with simultaneous tilt/yaw/shear perturbation."""
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration * cfg.raw_hz)) + 1
    t = np.arange(n) / cfg.raw_hz
    dt = 1.0 / cfg.raw_hz
    w = 2 * np.pi * cfg.z_frequency
    raw = cfg.depth_offset + cfg.z_amplitude * np.sin(w * t)
    raw_rate = cfg.z_amplitude * w * np.cos(w * t)
    phases = rng.uniform(0, 2 * np.pi, size=len(cfg.noise_frequencies))
    for f_i, ph in zip(cfg.noise_frequencies, phases):
        wi = 2 * np.pi * f_i
        raw = raw + cfg.depth_noise * np.sin(wi * t + ph)
        raw_rate = raw_rate + cfg.depth_noise * wi * np.cos(wi * t + ph)
    in_contact = raw > 0
    d = np.where(in_contact, raw, 0.0)
    d_dot = np.where(in_contact, raw_rate, 0.0)

    s = np.stack([_smooth_walk(rng, n, dt, cfg.shear_std, cfg.shear_limit, cfg.smoothing_s)
                  for _ in range(2)], axis=1)
    lim = np.deg2rad(cfg.tilt_limit_deg)
    roll = _smooth_walk(rng, n, dt, np.deg2rad(cfg.tilt_std_deg), lim, cfg.smoothing_s)
    pitch = _smooth_walk(rng, n, dt, np.deg2rad(cfg.tilt_std_deg), lim, cfg.smoothing_s)
    yaw = _smooth_walk(rng, n, dt, np.deg2rad(cfg.yaw_std_deg), np.deg2rad(cfg.yaw_limit_deg),
                       cfg.smoothing_s)
    yaw_rate = np.gradient(yaw, dt)
    return ContactTrajectory(t, d, d_dot, s, yaw, yaw_rate, roll, pitch)


def viscous_force_std(cfg: TrajectoryConfig, indenter: Indenter) -> float:
    """Analytic RMS of the viscous normal force c * d_dot over a full-contact trajectory.

    Valid while the depth never clips at zero; the sinusoid components are
    uncorrelated so their rate variances add.
    """
    var = (cfg.z_amplitude * 2 * np.pi * cfg.z_frequency) ** 2 / 2
    var += sum((cfg.depth_noise * 2 * np.pi * f) ** 2 / 2 for f in cfg.noise_frequencies)
    return float(indenter.damping * np.sqrt(var))


def _height_field(shape, size, ridge_half_length, d, yaw, cx, cy, X, Y):
    """Gel penetration h(x, y) for a batch of states; arrays broadcast over (T, H, W)."""
    dx = X[None] - cx[:, None, None]
    dy = Y[None] - cy[:, None, None]
    c, s = np.cos(yaw)[:, None, None], np.sin(yaw)[:, None, None]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dd = d[:, None, None]
    if shape == "sphere":
        return dd - (u**2 + v**2) / (2 * size)
    if shape == "flat":
        inside = (np.abs(u) <= size) & (np.abs(v) <= size)
        return np.where(inside, dd, -np.inf)
    inside = np.abs(v) <= ridge_half_length
    return np.where(inside, dd - u**2 / (2 * size), -np.inf)


def _tilt_offset(roll, pitch):
    return TILT_ARM * np.sin(pitch), TILT_ARM * np.sin(roll)


def contact_response_batch(traj: ContactTrajectory, indenter: Indenter, sensor: SensorVariant):
    """Vectorized contact law: returns pressure maps (T, 12, 12) and wrenches (T, 6)."""
    if np.any(traj.d < 0):
        raise ValueError("indentation depth must be non-negative")
    cx, cy = _tilt_offset(traj.roll, traj.pitch)
    h = _height_field(indenter.shape, indenter.size, indenter.ridge_half_length,
                      traj.d, traj.yaw, cx, cy, TAXEL_X, TAXEL_Y)
    p = indenter.stiffness * np.maximum(h, 0.0) * sensor.field_mask[None]
    fz_el = p.sum(axis=(1, 2)) * TAXEL_AREA
    fz = fz_el + indenter.damping * traj.d_dot
    shear = indenter.friction * fz_el[:, None] * np.tanh(traj.s / SHEAR_SCALE)
    total_p = p.sum(axis=(1, 2))
    safe = np.where(total_p > 0, total_p, 1.0)
    xbar = np.where(total_p > 0, (p * TAXEL_X).sum(axis=(1, 2)) / safe, 0.0)
    ybar = np.where(total_p > 0, (p * TAXEL_Y).sum(axis=(1, 2)) / safe, 0.0)
    area = (p > 0).sum(axis=(1, 2)) * TAXEL_AREA
    tz = TWIST_GAIN * traj.yaw_rate * area
    wrench = np.stack([shear[:, 0], shear[:, 1], fz, ybar * fz, -xbar * fz, tz], axis=1)
    return p, wrench


def contact_response(state: ContactState, indenter: Indenter, sensor: SensorVariant):
    """Pressure map (12x12, Pa) and wrench (fx, fy, fz, tx, ty, tz) for one state."""
    p, w = contact_response_batch(ContactTrajectory.from_states([state]), indenter, sensor)
    return p[0], w[0]


def render_tactile_batch(traj: ContactTrajectory, indenter: Indenter, sensor: SensorVariant) -> np.ndarray:
    cx, cy = _tilt_offset(traj.roll, traj.pitch)
    gx = cx + GEL_DRAG * traj.s[:, 0]
    gy = cy + GEL_DRAG * traj.s[:, 1]
    h = _height_field(indenter.shape, indenter.size, indenter.ridge_half_length,
                      traj.d, traj.yaw, gx, gy, PIX_X, PIX_Y)
    img = sensor.gain * np.maximum(h, 0.0)
    rest = sensor.marker_positions()
    if len(rest):
        c, s = np.cos(traj.yaw), np.sin(traj.yaw)
        mx = c[:, None] * rest[None, :, 0] - s[:, None] * rest[None, :, 1] + traj.s[:, 0:1]
        my = s[:, None] * rest[None, :, 0] + c[:, None] * rest[None, :, 1] + traj.s[:, 1:2]
        sigma = 0.5 * sensor.marker_radius_px * PIXEL_PITCH
        # separable gaussian dots: (T, M, W) x (T, M, H)
        ex = np.exp(-((PIX_X[0][None, None, :] - mx[:, :, None]) ** 2) / (2 * sigma**2))
        ey = np.exp(-((PIX_Y[:, 0][None, None, :] - my[:, :, None]) ** 2) / (2 * sigma**2))
        img = img + MARKER_INTENSITY * np.einsum("tmh,tmw->thw", ey, ex)
    return np.clip(img, 0.0, 1.0)


def render_tactile(state: ContactState, indenter: Indenter, sensor: SensorVariant) -> np.ndarray:
    return render_tactile_batch(ContactTrajectory.from_states([state]), indenter, sensor)[0]


def simulate_episode(cfg: TrajectoryConfig, indenter: Indenter, sensor: SensorVariant,
                     seed: int | None = None) -> Episode:
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    traj = press_and_perturb_trajectory(cfg)
    pm_raw, wr_raw = contact_response_batch(traj, indenter, sensor)
    n_frames = int(round(cfg.duration * TACTILE_HZ))
    t_tac = np.arange(n_frames) * FRAME_DT
    pmaps = resample_to_tactile_rate(traj.t, pm_raw, t_tac)
    wrenches = resample_to_tactile_rate(traj.t, wr_raw, t_tac)
    images = render_tactile_batch(traj.interpolate(t_tac), indenter, sensor)
    pmaps = pmaps * sensor.field_mask[None]
    return Episode(images=images, pmaps=pmaps, wrenches=wrenches, timestamps=t_tac,
                   sensor_id=sensor.id, indenter_id=indenter.id, seed=int(cfg.seed),
                   taxel_area=TAXEL_AREA)


def inject_label_noise(episode: Episode, sigma_frac: float, stats: Normalization, seed: int = 0) -> Episode:
    """Gaussian noise on the force labels (wrench and pressure); images untouched.

    Noise std is ``sigma_frac`` times the per-channel training std.
    """
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be non-negative")
    if sigma_frac == 0:
        return episode.replace()
    rng = np.random.default_rng(seed)
    wr = episode.wrenches + rng.standard_normal(episode.wrenches.shape) * sigma_frac * stats.wrench_std
    pm = episode.pmaps + (rng.standard_normal(episode.pmaps.shape) * sigma_frac * stats.pmap_std).astype(np.float32)
    return episode.replace(wrenches=wr, pmaps=pm)


def _ring_mask(top=True, bottom=True, left=True, right=True):
    m = np.ones((GRID, GRID), dtype=bool)
    if top:
        m[0, :] = False
    if bottom:
        m[-1, :] = False
    if left:
        m[:, 0] = False
    if right:
        m[:, -1] = False
    return m


def _indenter_library() -> dict[str, Indenter]:
    """Twelve presets. Every preset has its own footprint size so that stiffness,
    which the image cannot show directly, is tied to a visible geometry."""
    lib = {}
    specs = {
        # shape: sizes (soft-small, hard-small, soft-large, hard-large), hard k
        "sphere": ((4.8e-3, 4e-3, 7e-3, 6e-3), 5e8),
        "flat": ((2.4e-3, 2e-3, 3.5e-3, 3e-3), 3e8),
        "ridge": ((3.6e-3, 3e-3, 5.8e-3, 5e-3), 1.6e8),
    }
    for shape, (sizes, k_hard) in specs.items():
        it = iter(sizes)
        for big in (False, True):
            for hard in (False, True):
                name = f"{shape}-{'hard' if hard else 'soft'}-{'large' if big else 'small'}"
                lib[name] = Indenter(name, shape, next(it), k_hard if hard else 0.8 * k_hard,
                                     damping=1200.0, friction=0.6 if hard else 0.75)
    return lib


INDENTERS: dict[str, Indenter] = _indenter_library()

SENSORS: dict[str, SensorVariant] = {
    s.id: s for s in [
        SensorVariant("plain", None, 0.0, 450.0, _ring_mask()),
        SensorVariant("m4x4", (4, 4), 2.2, 520.0, _ring_mask(top=False, bottom=False)),
        SensorVariant("m7x7", (7, 7), 1.6, 400.0, _ring_mask(left=False, right=False)),
        SensorVariant("m9x9", (9, 9), 1.3, 490.0, _ring_mask()),
        SensorVariant("m7x9", (7, 9), 1.5, 430.0, _ring_mask(top=False)),
    ]
}


def episode_config(seed: int, duration: float = 4.0) -> TrajectoryConfig:
    """Per-episode trajectory parameters, a pure function of the episode seed."""
    rng = np.random.default_rng([int(seed), 7919])
    return TrajectoryConfig(
        duration=duration,
        depth_offset=rng.uniform(0.7e-3, 0.9e-3),
        z_amplitude=rng.uniform(0.2e-3, 0.45e-3),
        z_frequency=rng.uniform(0.5, 1.5),
        seed=int(seed),
    )


def generate_dataset(n_episodes: int, sensors: Sequence[str], indenters: Sequence[str] | None = None,
                     duration: float = 4.0, seed: int = 0) -> list[Episode]:
    """Episodes cycling through ``sensors`` with seeded indenter and trajectory draws."""
    indenters = list(INDENTERS) if indenters is None else list(indenters)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    picks = rng.integers(0, len(indenters), size=n_episodes)
    episodes = []
    for i in range(n_episodes):
        sensor = SENSORS[sensors[i % len(sensors)]]
        indenter = INDENTERS[indenters[picks[i]]]
        cfg = episode_config(int(seeds[i]), duration)
        episodes.append(simulate_episode(cfg, indenter, sensor))
    return episodes


def dataset_viscous_floor(episodes: Sequence[Episode]) -> float:
    """RMS over episodes of the analytic viscous-force std, from each episode's config."""
    var = [viscous_force_std(episode_config(ep.seed, len(ep) * FRAME_DT), INDENTERS[ep.indenter_id]) ** 2
           for ep in episodes]
    return float(np.sqrt(np.mean(var)))
