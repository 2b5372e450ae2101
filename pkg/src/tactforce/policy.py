"""Conditional flow-matching action head and a toy grip-force task.

The task: hold an object of hidden mass and friction while it is lifted. The
grip must end inside [1.1, 1.6] x the minimum holding grip without the object
ever slipping or being crushed. Mass and friction reach the policy only
through the tactile channel (shear under load), so a proprioception-only
policy can at best guess.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from scipy.stats import binomtest
from sklearn.base import BaseEstimator
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .data import FRAME_DT, Episode
from .errors import ConfigError, NumericalError
from .sim import (INDENTERS, SENSORS, SHEAR_SCALE, ContactTrajectory, Indenter, SensorVariant,
                  contact_response_batch, render_tactile_batch)
from .training import cosine_lr, set_lr

GRAVITY = 9.81
ACTION_LIMIT = 5.0  # N per step
SUCCESS_MARGIN = 0.1
CRUSH_FACTOR = 1.6
EXPERT_FACTOR = 1.3
EXPERT_STEP = 2.0  # N per step
EXEC_STEPS = 4


# flow matching -------------------------------------------------------------------

def flow_interpolate(a, u, tau):
    """tau * a + (1 - tau) * u; tau broadcasts over trailing action dims."""
    tau_arr = torch.as_tensor(tau) if isinstance(a, torch.Tensor) else np.asarray(tau, dtype=np.float64)
    if bool((tau_arr < 0).any()) or bool((tau_arr > 1).any()):
        raise ValueError("flow time must lie in [0, 1]")
    if isinstance(a, torch.Tensor) and tau_arr.ndim == 1:
        tau_arr = tau_arr[:, None]
    elif not isinstance(a, torch.Tensor) and tau_arr.ndim == 1 and np.ndim(a) == 2:
        tau_arr = tau_arr[:, None]
    return tau_arr * a + (1 - tau_arr) * u


def fm_loss(velocity: Callable, obs: dict, actions: torch.Tensor, generator: torch.Generator | None = None,
            tau: torch.Tensor | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Flow-matching regression of the velocity onto (a - u), one (tau, u) draw per element.

    Squared error is summed over action dims and averaged over the batch.
    """
    if not torch.isfinite(actions).all():
        raise NumericalError("non-finite actions in flow-matching batch")
    b = actions.shape[0]
    if tau is None:
        tau = torch.rand(b, generator=generator, dtype=actions.dtype)
    if noise is None:
        noise = torch.randn(actions.shape, generator=generator, dtype=actions.dtype)
    a_tau = flow_interpolate(actions, noise, tau)
    pred = velocity(a_tau, tau, obs)
    return ((pred - (actions - noise)) ** 2).sum(-1).mean()


def sample_action(velocity: Callable, obs: dict, a0: torch.Tensor, steps: int = 10, delta: float = 0.1):
    """Euler integration of the velocity field from A^0 (noise) at tau=0 to tau=1."""
    if steps < 1 or abs(steps * delta - 1.0) > 1e-9:
        raise ConfigError(f"Euler schedule must cover [0, 1]: steps * delta = {steps * delta}")
    a = a0
    for k in range(steps):
        tau = torch.full((a.shape[0],), k * delta, dtype=a.dtype)
        a = a + delta * velocity(a, tau, obs)
    return a


class VelocityNet(torch.nn.Module):
    """Residual MLP on (a_tau, tau, context embedding, tactile embedding, proprioception)."""

    def __init__(self, horizon: int = 8, z_dim: int = 0, q_dim: int = 3, n_ctx: int = 3, ctx_dim: int = 8,
                 hidden: int = 128, n_blocks: int = 3):
        super().__init__()
        self.ctx = torch.nn.Embedding(n_ctx, ctx_dim)
        self.z_dim = z_dim
        self.inp = torch.nn.Linear(horizon + 1 + ctx_dim + z_dim + q_dim, hidden)
        self.blocks = torch.nn.ModuleList([
            torch.nn.Sequential(torch.nn.LayerNorm(hidden), torch.nn.Linear(hidden, hidden), torch.nn.GELU(),
                                torch.nn.Linear(hidden, hidden))
            for _ in range(n_blocks)])
        self.out = torch.nn.Linear(hidden, horizon)

    def forward(self, a_tau, tau, obs):
        parts = [a_tau, tau[:, None].to(a_tau.dtype), self.ctx(obs["ctx"]).to(a_tau.dtype)]
        if self.z_dim:
            parts.append(obs["z"])
        parts.append(obs["q"])
        x = self.inp(torch.cat(parts, dim=1))
        for blk in self.blocks:
            x = x + blk(x)
        return self.out(torch.nn.functional.gelu(x))


# grip environment ------------------------------------------------------------------

@dataclass
class GripEnvConfig:
    horizon_steps: int = 24
    ramp_steps: int = 16
    initial_load: float = 0.02  # fraction of the weight already carried at t=0
    initial_grip: float = 0.5
    mass_ranges: tuple = ((0.4, 0.8), (0.7, 1.1), (1.0, 1.5))
    friction_range: tuple = (0.4, 1.0)
    sensor: str = "m7x7"
    surface: str = "sphere-hard-large"
    window: int = 5


@dataclass
class GripEnvState:
    mass: np.ndarray
    friction: np.ndarray
    grip: np.ndarray
    slip: np.ndarray
    crush: np.ndarray
    ctx: np.ndarray
    step: int = 0

    @property
    def min_grip(self) -> np.ndarray:
        return self.mass * GRAVITY / (2 * self.friction)

    @property
    def crush_grip(self) -> np.ndarray:
        return CRUSH_FACTOR * self.min_grip

    @property
    def phase(self) -> str:
        return "approach" if self.step == 0 else "lift"

    def success(self) -> np.ndarray:
        lo = self.min_grip * (1 + SUCCESS_MARGIN)
        return (self.grip >= lo) & (self.grip <= self.crush_grip) & ~self.slip & ~self.crush


class GripEnv:
    """Vectorized grip-and-lift episodes; one env step is one tactile frame."""

    def __init__(self, config: GripEnvConfig | None = None, tactile_encoder: Callable | None = None):
        self.config = config or GripEnvConfig()
        self.tactile_encoder = tactile_encoder
        self.sensor: SensorVariant = SENSORS[self.config.sensor]
        self.surface: Indenter = INDENTERS[self.config.surface]

    def reset(self, n: int, seed: int) -> dict:
        cfg = self.config
        rng = np.random.default_rng(seed)
        ctx = rng.integers(0, len(cfg.mass_ranges), size=n)
        lo = np.array([cfg.mass_ranges[c][0] for c in ctx])
        hi = np.array([cfg.mass_ranges[c][1] for c in ctx])
        self.state = GripEnvState(
            mass=rng.uniform(lo, hi), friction=rng.uniform(*cfg.friction_range, size=n),
            grip=np.full(n, cfg.initial_grip), slip=np.zeros(n, bool), crush=np.zeros(n, bool), ctx=ctx)
        self._depth_prev = None
        self.frames: list[np.ndarray] = []
        self.contact: list[ContactTrajectory] = []
        self._check_flags()
        self._render()
        return self.observe()

    def load_fraction(self, step: int) -> float:
        cfg = self.config
        return cfg.initial_load + (1 - cfg.initial_load) * min(1.0, step / cfg.ramp_steps)

    def contact_state(self) -> ContactTrajectory:
        """Gel contact implied by the current grip and tangential load."""
        st, n = self.state, len(self.state.grip)
        k, r = self.surface.stiffness, self.surface.size
        depth = np.sqrt(np.maximum(st.grip, 0.0) / (k * np.pi * r))  # continuum sphere law
        load = self.load_fraction(st.step) * st.mass * GRAVITY / 2
        ratio = np.where(st.grip > 0, load / (st.friction * np.maximum(st.grip, 1e-9)), 1.0)
        shear = SHEAR_SCALE * np.arctanh(np.clip(ratio, 0.0, 0.995))
        d_dot = np.zeros(n) if self._depth_prev is None else (depth - self._depth_prev) / FRAME_DT
        self._depth_prev = depth
        zeros = np.zeros(n)
        return ContactTrajectory(np.full(n, st.step * FRAME_DT), depth, d_dot,
                                 np.stack([zeros, shear], axis=1), zeros, zeros, zeros, zeros)

    def _render(self):
        traj = self.contact_state()
        self.contact.append(traj)
        self.frames.append(render_tactile_batch(traj, self.surface, self.sensor).astype(np.float32))

    def _check_flags(self):
        st = self.state
        st.slip |= self.load_fraction(st.step) * st.mass * GRAVITY / 2 > st.friction * st.grip
        st.crush |= st.grip > st.crush_grip

    def step(self, increments: np.ndarray) -> dict:
        st = self.state
        inc = np.clip(np.asarray(increments, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)
        st.grip = np.maximum(st.grip + inc, 0.0)
        st.step += 1
        self._check_flags()
        self._render()
        return self.observe()

    def window(self) -> np.ndarray:
        """Last N tactile frames per env (earliest frame repeated at episode start)."""
        n = self.config.window
        idx = [max(0, len(self.frames) - n + j) for j in range(n)]
        return np.stack([self.frames[i] for i in idx], axis=1)

    def proprio(self) -> np.ndarray:
        st = self.state
        width = 0.05 - 2 * self.contact[-1].d  # jaw opening on a 50 mm object
        return np.stack([width / 0.05, st.grip / 20.0,
                         np.full(len(st.grip), st.step / self.config.horizon_steps)], axis=1)

    def observe(self) -> dict:
        obs = {"ctx": self.state.ctx.copy(), "q": self.proprio()}
        if self.tactile_encoder is not None:
            obs["z"] = np.asarray(self.tactile_encoder(self.window()))
        return obs

    @property
    def done(self) -> bool:
        return self.state.step >= self.config.horizon_steps


def expert_target(mass, friction) -> np.ndarray:
    return EXPERT_FACTOR * np.asarray(mass) * GRAVITY / (2 * np.asarray(friction))


def expert_policy(state: GripEnvState, horizon: int = 8) -> np.ndarray:
    """Planned grip increments ramping toward 1.3x the minimum holding grip."""
    target = expert_target(state.mass, state.friction)
    g = state.grip.copy()
    chunk = np.zeros((len(g), horizon))
    for k in range(horizon):
        chunk[:, k] = np.clip(target - g, -EXPERT_STEP, EXPERT_STEP)
        g = g + chunk[:, k]
    return chunk


class Policy(Protocol):
    def act(self, obs: dict, env: GripEnv) -> np.ndarray: ...


class ExpertPolicy:
    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def act(self, obs, env):
        return expert_policy(env.state, self.horizon)


class RandomPolicy:
    def __init__(self, horizon: int = 8, seed: int = 0):
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)

    def act(self, obs, env):
        return self.rng.uniform(-ACTION_LIMIT, ACTION_LIMIT, size=(len(obs["ctx"]), self.horizon))


def rollout(policy: Policy, env: GripEnv, n: int, seed: int, record: bool = False):
    """Receding-horizon rollout: execute the first EXEC_STEPS of each chunk, then replan."""
    obs = env.reset(n, seed)
    log = {"obs": [], "actions": []}
    chunk, k = None, EXEC_STEPS
    while not env.done:
        if record:
            log["obs"].append(obs)
            log["actions"].append(expert_policy(env.state))
        if k >= EXEC_STEPS:
            chunk, k = policy.act(obs, env), 0
        obs = env.step(chunk[:, k])
        k += 1
    return env.state, log


def evaluate_policy(policy: Policy, env: GripEnv, episodes: int = 200, seed: int = 0) -> dict:
    """Success fraction with a 95% Clopper-Pearson interval and per-episode records."""
    state, _ = rollout(policy, env, episodes, seed)
    ok = state.success()
    k = int(ok.sum())
    ci = binomtest(k, episodes).proportion_ci(0.95)
    records = [{"seed": seed, "episode": i, "success": bool(ok[i]), "final_grip": float(state.grip[i]),
                "slip": bool(state.slip[i]), "crush": bool(state.crush[i])} for i in range(episodes)]
    return {"success_rate": k / episodes, "ci95": (float(ci.low), float(ci.high)), "records": records}


def collect_demonstrations(env: GripEnv, n_episodes: int, seed: int) -> list[Episode]:
    """Expert rollouts stored as episodes with extra per-frame arrays.

    Extras: ``actions`` (T, H) expert chunk at each step, ``proprio`` (T, 3),
    ``context`` (T, 1).
    """
    expert = ExpertPolicy()
    encoder, env.tactile_encoder = env.tactile_encoder, None
    try:
        state, log = rollout(expert, env, n_episodes, seed, record=True)
        frames = np.stack(env.frames[:-1], axis=1)  # frames observed before each action
        contact = env.contact[:-1]
    finally:
        env.tactile_encoder = encoder
    t_steps = frames.shape[1]
    actions = np.stack(log["actions"], axis=1)
    proprio = np.stack([o["q"] for o in log["obs"]], axis=1)
    episodes = []
    for i in range(n_episodes):
        traj = ContactTrajectory(*[np.stack([getattr(c, f)[i] for c in contact])
                                   for f in ("t", "d", "d_dot", "s", "yaw", "yaw_rate", "roll", "pitch")])
        surface = Indenter(env.surface.id, env.surface.shape, env.surface.size, env.surface.stiffness,
                           env.surface.damping, float(state.friction[i]))
        pm, wr = contact_response_batch(traj, surface, env.sensor)
        episodes.append(Episode(
            images=frames[i], pmaps=pm, wrenches=wr, timestamps=np.arange(t_steps) * FRAME_DT,
            sensor_id=env.sensor.id, indenter_id=env.surface.id, seed=int(seed) * 100003 + i,
            extras={"actions": actions[i].astype(np.float32), "proprio": proprio[i].astype(np.float32),
                    "context": np.full((t_steps, 1), state.ctx[i], dtype=np.float32)}))
    return episodes


def history_windows(images: np.ndarray, window: int) -> np.ndarray:
    """(T, N, H, W) windows ending at every frame, padded with the first frame."""
    t = np.arange(len(images))
    idx = np.maximum(t[:, None] - (window - 1) + np.arange(window)[None, :], 0)
    return images[idx]


def demonstrations_to_arrays(episodes, tactile_encoder: Callable | None, window: int = 5):
    """Flatten demonstration episodes into (obs dict, actions) training arrays."""
    ctx = np.concatenate([ep.extras["context"][:, 0] for ep in episodes]).astype(np.int64)
    q = np.concatenate([ep.extras["proprio"] for ep in episodes]).astype(np.float64)
    actions = np.concatenate([ep.extras["actions"] for ep in episodes]).astype(np.float64)
    obs = {"ctx": ctx, "q": q}
    if tactile_encoder is not None:
        obs["z"] = np.concatenate([np.asarray(tactile_encoder(history_windows(ep.images, window)))
                                   for ep in episodes])
    return obs, actions


class FlowMatchingPolicy(BaseEstimator):
    """Flow-matching action-chunk policy conditioned on context, proprioception and
    (optionally) tactile embeddings.

    ``fit(obs, actions)`` with ``obs`` a dict of arrays ``ctx`` (M,), ``q``
    (M, 3) and, when ``use_tactile``, ``z`` (M, d); ``actions`` (M, H) grip
    increments in newtons.
    """

    def __init__(self, horizon=8, use_tactile=True, n_ctx=3, ctx_dim=8, hidden=128, n_blocks=3,
                 n_steps=3000, batch_size=256, learning_rate=1e-3, euler_steps=10, delta=0.1,
                 random_state=0):
        self.horizon = horizon
        self.use_tactile = use_tactile
        self.n_ctx = n_ctx
        self.ctx_dim = ctx_dim
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.euler_steps = euler_steps
        self.delta = delta
        self.random_state = random_state

    def _tensors(self, obs: dict) -> dict:
        out = {"ctx": torch.as_tensor(np.asarray(obs["ctx"]), dtype=torch.long),
               "q": torch.as_tensor(np.asarray(obs["q"], dtype=np.float32))}
        if self.use_tactile:
            if "z" not in obs:
                raise ValueError("tactile policy needs 'z' observations")
            out["z"] = torch.as_tensor(self.z_scaler_.transform(np.asarray(obs["z"])).astype(np.float32))
        return out

    def fit(self, obs: dict, actions):
        if abs(self.euler_steps * self.delta - 1.0) > 1e-9:
            raise ConfigError("euler_steps * delta must equal 1")
        actions = np.asarray(actions, dtype=np.float32)
        if actions.ndim != 2 or actions.shape[1] != self.horizon:
            raise ValueError(f"actions must be (M, {self.horizon})")
        torch.manual_seed(self.random_state)
        gen = torch.Generator().manual_seed(self.random_state)
        if self.use_tactile:
            self.z_scaler_ = StandardScaler().fit(np.asarray(obs["z"]))
        z_dim = np.asarray(obs["z"]).shape[1] if self.use_tactile else 0
        self.net_ = VelocityNet(self.horizon, z_dim, np.asarray(obs["q"]).shape[1], self.n_ctx,
                                self.ctx_dim, self.hidden, self.n_blocks)
        data = self._tensors(obs)
        a = torch.as_tensor(actions / ACTION_LIMIT)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.history_ = []
        m = len(a)
        for step in range(self.n_steps):
            set_lr(opt, cosine_lr(step, self.n_steps, self.learning_rate, warmup=50))
            idx = torch.randint(0, m, (min(self.batch_size, m),), generator=gen)
            batch = {k: v[idx] for k, v in data.items()}
            loss = fm_loss(self.net_, batch, a[idx], gen)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite flow-matching loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if (step + 1) % 100 == 0:
                self.history_.append({"step": step + 1, "fm_loss": float(loss.detach())})
        self.net_.eval()
        return self

    def sample(self, obs: dict, generator: torch.Generator | None = None) -> np.ndarray:
        check_is_fitted(self, "net_")
        data = self._tensors(obs)
        a0 = torch.randn(len(data["ctx"]), self.horizon, generator=generator)
        with torch.no_grad():
            a1 = sample_action(self.net_, data, a0, self.euler_steps, self.delta)
        return a1.numpy().astype(np.float64) * ACTION_LIMIT

    def predict(self, obs: dict) -> np.ndarray:
        return self.sample(obs, torch.Generator().manual_seed(self.random_state))

    def as_policy(self, seed: int = 0) -> "SampledPolicy":
        return SampledPolicy(self, seed)


class SampledPolicy:
    """Adapter from a fitted flow policy to the rollout interface (seeded noise draws)."""

    def __init__(self, model: FlowMatchingPolicy, seed: int = 0):
        self.model = model
        self.generator = torch.Generator().manual_seed(seed)

    def act(self, obs, env):
        return self.model.sample(obs, self.generator)
