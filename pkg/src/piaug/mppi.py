"""Sampling-based model-predictive control with a multi-waypoint cost.

Each control step perturbs the nominal action sequence with Gaussian
noise, rolls all samples out under the plugged-in dynamics model (bicycle
or learned), scores them against the waypoint plan, and blends them with
exponentially weighted averaging. The learned-model path encodes the
shared observation once per step and reuses the latent across all
samples.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kbm as kbm_mod
from . import model as nn_mod
from .kbm import ActionCmd, KbmParams
from .state import FullState, Observation, full_to_kbm, pitch_from_rot6d


@dataclasses.dataclass(frozen=True)
class MppiConfig:
    n_samples: int = 2048
    horizon: int = 50
    temperature: float = 5.0
    noise_std: tuple[float, float] = (0.15, 0.1)
    dt: float = 0.1
    seed: int = 0
    waypoint_chain: int = 3       # waypoints chained into the cost-to-go
    control_weight: float = 0.05
    terminal_weight: float = 3.0
    speed_cap: float = 5.0        # enforced through cost, not clamping
    speed_cap_weight: float = 6.0
    delta_max: float = 0.52
    smooth_window: int = 5        # moving-average window over the update


@dataclasses.dataclass(frozen=True)
class WaypointPlan:
    """Ordered planar waypoints with a shared entry radius."""

    points: np.ndarray        # (M, 2)
    goal_radius: float

    def __post_init__(self):
        if self.points.shape[0] < 2:
            raise ValueError("need at least two waypoints")
        if self.goal_radius <= 0:
            raise ValueError("goal_radius must be > 0")

    @property
    def n(self) -> int:
        return self.points.shape[0]


def figure_eight_plan(goal_radius: float, spacing: float = 10.0,
                      n_segments: int = 12, center=(0.0, 0.0)) -> WaypointPlan:
    """Waypoints along a two-lobe figure-8, ``spacing`` meters apart.

    Twelve 10 m segments give thirteen waypoints (start, eleven goals,
    finish) on lobes of radius ``n_segments * spacing / (4 * pi)``; the
    crossing point is visited at the start, middle, and end.
    """
    total = n_segments * spacing
    R = total / (4.0 * np.pi)
    pts = []
    for i in range(n_segments + 1):
        s = i * spacing
        if s <= total / 2:
            ang = np.pi - s / R
            p = (R + R * np.cos(ang), R * np.sin(ang))
        else:
            ang = (s - total / 2) / R
            p = (-R + R * np.cos(ang), R * np.sin(ang))
        pts.append((p[0] + center[0], p[1] + center[1]))
    return WaypointPlan(points=np.array(pts), goal_radius=goal_radius)


def _chain_cost(points: np.ndarray, a: np.ndarray, K: int) -> np.ndarray:
    """Summed lengths of the next K-1 legs starting at waypoint index a."""
    M = points.shape[0]
    leg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(leg)])
    a = np.minimum(a, M - 1)
    end = np.minimum(a + K - 1, M - 1)
    return cum[end] - cum[a]


def waypoint_progress_costs(xy: np.ndarray, v: np.ndarray, plan: WaypointPlan,
                            active_index: int, cfg: MppiConfig
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Stage costs of (N, T, 2) positions with per-trajectory waypoint
    progress; waypoints count as reached when any point enters the radius.

    Returns (summed stage costs (N,), final active indices (N,)).
    """
    N, T = xy.shape[0], xy.shape[1]
    pts = plan.points
    M = pts.shape[0]
    active = np.full(N, active_index, dtype=int)
    total = np.zeros(N)
    for t in range(T):
        tgt = pts[np.minimum(active, M - 1)]
        d = np.linalg.norm(xy[:, t, :] - tgt, axis=1)
        reached = (d <= plan.goal_radius) & (active < M)
        active = active + reached.astype(int)
        tgt = pts[np.minimum(active, M - 1)]
        d = np.linalg.norm(xy[:, t, :] - tgt, axis=1)
        togo = np.where(active >= M, 0.0,
                        d + _chain_cost(pts, active, cfg.waypoint_chain))
        over = np.maximum(0.0, np.abs(v[:, t]) - cfg.speed_cap)
        total += togo + cfg.speed_cap_weight * over * over
    # terminal pull toward the remaining plan
    tgt = pts[np.minimum(active, M - 1)]
    d = np.linalg.norm(xy[:, -1, :] - tgt, axis=1)
    togo = np.where(active >= M, 0.0, d + _chain_cost(pts, active, cfg.waypoint_chain))
    total += cfg.terminal_weight * togo
    return total, active


def trajectory_cost(traj: np.ndarray, plan: WaypointPlan, active_index: int,
                    controls: np.ndarray | None = None,
                    cfg: MppiConfig = MppiConfig()) -> float:
    """Cost of one rolled-out trajectory (rows ``[x, y, psi, v, delta]``)."""
    traj = np.asarray(traj, dtype=float)
    cost, _ = waypoint_progress_costs(traj[None, :, 0:2], traj[None, :, 3],
                                      plan, active_index, cfg)
    out = float(cost[0])
    if controls is not None:
        out += cfg.control_weight * float(np.sum(np.asarray(controls) ** 2))
    return out


# ---------------------------------------------------------------------------
# dynamics adapters


class KbmMppiModel:
    """Bicycle-model rollouts for the controller; pitch is held at the
    value read from the current state (the controller has no terrain)."""

    def __init__(self, params: KbmParams):
        self.params = params

    def rollout_states(self, state: FullState, obs: Observation,
                       actions: np.ndarray) -> np.ndarray:
        pitch = pitch_from_rot6d(state.r6)
        x0 = full_to_kbm(state).as_array()
        N = actions.shape[0]
        batch = np.broadcast_to(x0, (N, 5)).copy()

        def provider(x, y, step):
            return np.full_like(np.asarray(x, dtype=float), pitch)

        return kbm_mod.rollout_array(batch, actions, provider, self.params)


class NeuralMppiModel:
    """Learned-dynamics rollouts with the shared-latent optimization."""

    def __init__(self, params: nn_mod.ModelParams):
        self.params = params

    def rollout_states(self, state: FullState, obs: Observation,
                       actions: np.ndarray) -> np.ndarray:
        preds = rollout_batch_shared(self.params, state.as_array(), obs, actions)
        return nn_mod.project_to_kbm(preds)


def rollout_batch_shared(params: nn_mod.ModelParams, x0_row: np.ndarray,
                         obs: Observation, action_batch: np.ndarray) -> np.ndarray:
    """Encode the shared observation once, then roll out all samples batched."""
    N = action_batch.shape[0]
    latent = nn_mod.encode_obs(params, obs)
    latents = np.broadcast_to(latent, (N, latent.shape[0]))
    x0 = np.broadcast_to(np.asarray(x0_row, dtype=float), (N, 16))
    return nn_mod.rollout(params, x0, latents, action_batch)


def rollout_batch_naive(params: nn_mod.ModelParams, x0_row: np.ndarray,
                        obs: Observation, action_batch: np.ndarray) -> np.ndarray:
    """Reference path without the optimization: every sample re-encodes the
    observation and rolls out on its own."""
    outs = []
    for i in range(action_batch.shape[0]):
        latent = nn_mod.encode_obs(params, obs)
        outs.append(nn_mod.rollout(params, np.asarray(x0_row)[None], latent[None],
                                   action_batch[i:i + 1])[0])
    return np.stack(outs)


# ---------------------------------------------------------------------------
# the controller step


def _smooth_update(update: np.ndarray, window: int) -> np.ndarray:
    """Moving average along the horizon; keeps maneuvers, kills per-step
    sampling wobble in the blended plan."""
    if window <= 1:
        return update
    pad = window // 2
    padded = np.pad(update, ((pad, pad), (0, 0)), mode="edge")
    kernel = np.ones(window) / window
    out = np.empty_like(update)
    for c in range(update.shape[1]):
        out[:, c] = np.convolve(padded[:, c], kernel, mode="valid")
    return out


def mppi_step(state: FullState, obs: Observation, nominal: np.ndarray,
              cfg: MppiConfig, dyn_model, plan: WaypointPlan, active_index: int,
              rng: np.random.Generator):
    """One receding-horizon update.

    Returns ``(action, new_nominal, info)``; ``info`` carries the minimum
    sampled cost, the normalized weights, and a degeneracy flag.
    """
    lo = np.array([0.0, -cfg.delta_max])
    hi = np.array([1.0, cfg.delta_max])
    N, T = cfg.n_samples, nominal.shape[0]
    eps = rng.standard_normal((N, T, 2)) * np.asarray(cfg.noise_std)
    samples = np.clip(nominal[None] + eps, lo, hi)
    trajs = dyn_model.rollout_states(state, obs, samples)
    costs, _ = waypoint_progress_costs(trajs[:, :, 0:2], trajs[:, :, 3],
                                       plan, active_index, cfg)
    costs = costs + cfg.control_weight * np.sum(samples**2, axis=(1, 2))
    finite = np.isfinite(costs)
    if not finite.any():
        return ActionCmd(0.0, 0.0), nominal.copy(), dict(min_cost=np.inf,
                                                         weights=None, degenerate=True)
    costs = np.where(finite, costs, np.inf)
    mc = float(np.min(costs))
    w = np.exp(-(costs - mc) / cfg.temperature)
    w = w / np.sum(w)
    update = np.einsum("n,ntc->tc", w, samples - nominal[None])
    new_nominal = np.clip(nominal + _smooth_update(update, cfg.smooth_window), lo, hi)
    action = ActionCmd(float(new_nominal[0, 0]), float(new_nominal[0, 1]))
    shifted = np.empty_like(new_nominal)
    shifted[:-1] = new_nominal[1:]
    shifted[-1] = new_nominal[-1]
    return action, shifted, dict(min_cost=mc, weights=w, degenerate=False)


class MppiController:
    """Stateful wrapper: keeps the nominal plan, the RNG stream, and the
    index of the next waypoint to reach."""

    def __init__(self, cfg: MppiConfig, dyn_model, plan: WaypointPlan,
                 seed: int | None = None):
        self.cfg = cfg
        self.model = dyn_model
        self.plan = plan
        self.rng = np.random.default_rng(
            np.random.SeedSequence([8181, cfg.seed if seed is None else seed]))
        self.nominal = np.zeros((cfg.horizon, 2))
        self.active_index = 0
        self.last_info: dict = {}

    def observe_position(self, x: float, y: float) -> None:
        """Advance the active waypoint when the vehicle enters its radius."""
        if self.active_index < self.plan.n:
            d = np.hypot(x - self.plan.points[self.active_index, 0],
                         y - self.plan.points[self.active_index, 1])
            if d <= self.plan.goal_radius:
                self.active_index += 1

    @property
    def done(self) -> bool:
        return self.active_index >= self.plan.n

    def step(self, state: FullState, obs: Observation) -> ActionCmd:
        action, self.nominal, self.last_info = mppi_step(
            state, obs, self.nominal, self.cfg, self.model, self.plan,
            self.active_index, self.rng)
        return action
