"""Synthetic ground-truth world: procedural terrain plus a slip-augmented
bicycle simulator that deliberately violates the kinematic model.

The world frame is right-handed with the third axis pointing down
(aerospace convention), so terrain altitude ``alt`` maps to position
``z = -alt`` and a nose-up (climbing) attitude has positive pitch. The
truth model extends the planar bicycle kinematics with lateral tire
slip, yaw-rate attenuation at high lateral-acceleration demand
(understeer), friction that varies across the map, and quadratic drag;
these are the effects the kinematic baseline cannot represent.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .augment import DataSequence
from .kbm import IDELTA_TARGET, ITHROTTLE
from .state import FullState, Observation, crop_observation, matrix_from_euler_zyx


class OutOfBoundsError(RuntimeError):
    """Vehicle left the driveable area; the episode is terminated."""


# ---------------------------------------------------------------------------
# terrain


def _box_blur(grid: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge clamping (one pass per axis)."""
    if radius < 1:
        return grid
    k = 2 * radius + 1
    out = grid
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        csum = np.cumsum(padded, axis=axis)
        zero = np.zeros_like(np.take(csum, [0], axis=axis))
        csum = np.concatenate([zero, csum], axis=axis)
        hi = np.take(csum, np.arange(k, csum.shape[axis]), axis=axis)
        lo = np.take(csum, np.arange(0, csum.shape[axis] - k), axis=axis)
        out = (hi - lo) / k
    return out


def _value_noise(rng: np.random.Generator, n: int, cells: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise on an ``n`` x ``n`` grid."""
    lattice = rng.standard_normal((cells + 1, cells + 1))
    g = np.linspace(0.0, cells, n, endpoint=False)
    i0 = np.floor(g).astype(int)
    f = g - i0
    s = f * f * (3.0 - 2.0 * f)
    sx, sy = s[:, None], s[None, :]
    a = lattice[np.ix_(i0, i0)]
    b = lattice[np.ix_(i0 + 1, i0)]
    c = lattice[np.ix_(i0, i0 + 1)]
    d = lattice[np.ix_(i0 + 1, i0 + 1)]
    return (
        a * (1 - sx) * (1 - sy)
        + b * sx * (1 - sy)
        + c * (1 - sx) * sy
        + d * sx * sy
    )


@dataclasses.dataclass
class Terrain:
    """Altitude and friction grids with continuous bilinear queries.

    Grids are indexed ``[ix, iy]`` with node ``(i, j)`` at world position
    ``(i * resolution, j * resolution)``. Queries outside the extent are
    edge-clamped.
    """

    height: np.ndarray
    friction: np.ndarray
    resolution: float
    seed: int

    @property
    def extent(self) -> float:
        return (self.height.shape[0] - 1) * self.resolution

    def contains(self, x, y) -> np.ndarray:
        e = self.extent
        return (x >= 0) & (x <= e) & (y >= 0) & (y <= e)

    def _bilinear(self, grid: np.ndarray, x, y) -> np.ndarray:
        n = grid.shape[0]
        gx = np.clip(np.asarray(x, dtype=float) / self.resolution, 0.0, n - 1.000001)
        gy = np.clip(np.asarray(y, dtype=float) / self.resolution, 0.0, n - 1.000001)
        ix = gx.astype(int)
        iy = gy.astype(int)
        fx = gx - ix
        fy = gy - iy
        return (
            grid[ix, iy] * (1 - fx) * (1 - fy)
            + grid[ix + 1, iy] * fx * (1 - fy)
            + grid[ix, iy + 1] * (1 - fx) * fy
            + grid[ix + 1, iy + 1] * fx * fy
        )

    def height_at(self, x, y) -> np.ndarray:
        return self._bilinear(self.height, x, y)

    def mu_at(self, x, y) -> np.ndarray:
        return self._bilinear(self.friction, x, y)

    def grad_at(self, x, y, baseline: float = 1.0):
        """Altitude gradient via symmetric differences over ``baseline`` meters."""
        b = baseline
        dx = (self.height_at(x + b, y) - self.height_at(x - b, y)) / (2 * b)
        dy = (self.height_at(x, y + b) - self.height_at(x, y - b)) / (2 * b)
        return dx, dy

    def pitch_at(self, x, y, heading, baseline: float = 1.0) -> np.ndarray:
        """Slope angle along ``heading``; positive while climbing."""
        dx, dy = self.grad_at(x, y, baseline)
        return np.arctan(dx * np.cos(heading) + dy * np.sin(heading))

    def roll_at(self, x, y, heading, baseline: float = 1.0) -> np.ndarray:
        """Bank angle; positive when the right side of the vehicle is lower."""
        dx, dy = self.grad_at(x, y, baseline)
        # body-right direction in the plane is (sin h, -cos h) ... rotated -90 deg
        right = dx * np.sin(heading) - dy * np.cos(heading)
        return np.arctan(-right)


MU_LO, MU_HI = 0.3, 1.0


def generate_terrain(
    seed: int,
    size: int = 512,
    roughness: float = 1.0,
    resolution: float = 0.5,
) -> Terrain:
    """Procedural terrain: low-frequency hills, localized steeper slopes
    that reach pitch magnitudes above 0.12 rad, and a friction field tied
    to local slope (steeper, rougher ground is more slippery, so friction
    is inferable from the height patch).
    """
    if size < 64:
        raise ValueError("terrain size must be >= 64")
    rng = np.random.default_rng(np.random.SeedSequence([77610, seed]))
    n = size
    h = np.zeros((n, n))
    if roughness > 0:
        amp, cells = 2.2 * roughness, 4
        for _ in range(5):
            h += amp * _value_noise(rng, n, cells)
            amp *= 0.30
            cells *= 2
        # localized steep hills so the high-pitch regime exists
        extent = (n - 1) * resolution
        xs = (np.arange(n) * resolution)[:, None]
        ys = (np.arange(n) * resolution)[None, :]
        n_hills = max(2, n // 128)
        for _ in range(n_hills):
            cx, cy = rng.uniform(0.2 * extent, 0.8 * extent, size=2)
            sigma = rng.uniform(10.0, 16.0)
            amp_h = rng.uniform(2.2, 3.2) * roughness * sigma / 12.0
            r2 = (xs - cx) ** 2 + (ys - cy) ** 2
            h += amp_h * np.exp(-r2 / (2 * sigma**2))

    gx, gy = np.gradient(h, resolution)
    slope = np.sqrt(gx**2 + gy**2)
    slope = _box_blur(slope, max(1, int(4.0 / resolution)))
    ramp = np.clip(slope / 0.14, 0.0, 1.0)
    mu = MU_HI - (MU_HI - MU_LO) * (ramp * ramp * (3 - 2 * ramp))
    if roughness > 0:
        mu = mu + 0.04 * _value_noise(rng, n, 8)
    mu = np.clip(mu, MU_LO, MU_HI)
    return Terrain(height=h, friction=mu, resolution=resolution, seed=seed)


# ---------------------------------------------------------------------------
# truth vehicle model


@dataclasses.dataclass(frozen=True)
class SimParams:
    """Constants of the truth model. Tuned once so the calibrated bicycle
    model stays close at low speed and diverges at high speed, then frozen.
    """

    wheelbase_L: float = 2.0
    K_t: float = 4.0
    K_b: float = 0.22
    drag: float = 0.012      # quadratic speed drag (1/m)
    K_f: float = 0.3         # rolling friction, scaled by local mu
    K_g: float = 1.0
    g: float = 9.81
    K_s: float = 5.0
    delta_max: float = 0.52
    understeer: float = 0.55  # lateral-accel fraction of mu*g where yaw response rolls off
    slip_gain: float = 0.4    # seconds; maps excess lateral demand to slip speed
    slip_thresh: float = 1.2  # m/s^2 of demand per unit mu before slip onset
    slip_tau: float = 0.3     # slip relaxation time (s)
    substeps: int = 5
    dt: float = 0.1


@dataclasses.dataclass(frozen=True)
class SimState:
    """Truth-model state: planar pose, forward/lateral speed, steering,
    plus attitude bookkeeping needed for the full-state projection."""

    x: float
    y: float
    yaw: float
    u: float          # body-forward speed
    s_lat: float      # body-lateral (rightward) slip speed
    delta: float
    pitch: float = 0.0
    roll: float = 0.0
    pitch_rate: float = 0.0
    roll_rate: float = 0.0
    yaw_rate: float = 0.0

    def core(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.u, self.s_lat, self.delta])


def initial_sim_state(x: float, y: float, yaw: float, u: float, terrain: Terrain,
                      params: SimParams, delta: float = 0.0) -> SimState:
    pitch = float(terrain.pitch_at(x, y, yaw))
    roll = float(terrain.roll_at(x, y, yaw))
    return SimState(x=x, y=y, yaw=yaw, u=u, s_lat=0.0, delta=delta,
                    pitch=pitch, roll=roll)


def _core_deriv(c: np.ndarray, throttle: float, delta_target: float,
                terrain: Terrain, p: SimParams) -> np.ndarray:
    x, y, yaw, u, s_lat, delta = c
    pitch = float(terrain.pitch_at(x, y, yaw))
    mu = float(terrain.mu_at(x, y))
    tan_d = np.tan(delta)
    a_lat = u * u * tan_d / p.wheelbase_L
    atten = 1.0 / np.sqrt(1.0 + (a_lat / (p.understeer * mu * p.g)) ** 2)
    yaw_rate = u * tan_d / p.wheelbase_L * atten
    demand = u * u * tan_d / (mu * p.wheelbase_L)
    excess = np.sign(demand) * max(abs(demand) - p.slip_thresh * mu, 0.0)
    s_target = -p.slip_gain * excess
    du = (
        p.K_t * throttle
        - p.K_b * u
        - p.drag * u * abs(u)
        - p.K_f * mu * np.sign(u) * np.cos(pitch)
        - p.K_g * p.g * np.sin(pitch)
    )
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array([
        u * cy - s_lat * sy,
        u * sy + s_lat * cy,
        yaw_rate,
        du,
        (s_target - s_lat) / p.slip_tau,
        p.K_s * (delta_target - delta),
    ])


def sim_step(s: SimState, action, terrain: Terrain, params: SimParams) -> SimState:
    """Advance the truth model by one logging period (midpoint substeps)."""
    throttle = float(np.clip(action[ITHROTTLE], 0.0, 1.0))
    delta_target = float(np.clip(action[IDELTA_TARGET], -params.delta_max, params.delta_max))
    c = s.core()
    h = params.dt / params.substeps
    for _ in range(params.substeps):
        k1 = _core_deriv(c, throttle, delta_target, terrain, params)
        k2 = _core_deriv(c + 0.5 * h * k1, throttle, delta_target, terrain, params)
        c = c + h * k2
        c[5] = np.clip(c[5], -params.delta_max, params.delta_max)
    margin = 2.0
    if not (margin <= c[0] <= terrain.extent - margin
            and margin <= c[1] <= terrain.extent - margin):
        raise OutOfBoundsError("vehicle left the terrain")
    pitch = float(terrain.pitch_at(c[0], c[1], c[2]))
    roll = float(terrain.roll_at(c[0], c[1], c[2]))
    tan_d = np.tan(c[5])
    a_lat = c[3] * c[3] * tan_d / params.wheelbase_L
    mu = float(terrain.mu_at(c[0], c[1]))
    atten = 1.0 / np.sqrt(1.0 + (a_lat / (params.understeer * mu * params.g)) ** 2)
    return SimState(
        x=float(c[0]), y=float(c[1]), yaw=float(c[2]),
        u=float(c[3]), s_lat=float(c[4]), delta=float(c[5]),
        pitch=pitch, roll=roll,
        pitch_rate=(pitch - s.pitch) / params.dt,
        roll_rate=(roll - s.roll) / params.dt,
        yaw_rate=float(c[3] * tan_d / params.wheelbase_L * atten),
    )


def to_full_state(s: SimState, terrain: Terrain) -> FullState:
    """Lossless projection of the truth state onto the 16-element state."""
    alt = float(terrain.height_at(s.x, s.y))
    R = matrix_from_euler_zyx(s.yaw, s.pitch, s.roll)
    cy, sy = np.cos(s.yaw), np.sin(s.yaw)
    vx = s.u * cy - s.s_lat * sy
    vy = s.u * sy + s.s_lat * cy
    dx, dy = terrain.grad_at(s.x, s.y)
    vz = -(dx * vx + dy * vy)  # z points down; climbing means z decreases
    v_body = R.T @ np.array([vx, vy, vz])
    sp, cp = np.sin(s.pitch), np.cos(s.pitch)
    sr, cr = np.sin(s.roll), np.cos(s.roll)
    w_body = np.array([
        s.roll_rate - s.yaw_rate * sp,
        s.pitch_rate * cr + s.yaw_rate * cp * sr,
        s.yaw_rate * cp * cr - s.pitch_rate * sr,
    ])
    r6 = R[:, :2].T.reshape(6)
    return FullState(p=np.array([s.x, s.y, -alt]), r6=r6, v=v_body, w=w_body,
                     delta=s.delta)


# ---------------------------------------------------------------------------
# data collection


@dataclasses.dataclass(frozen=True)
class CollectPolicy:
    """Driving policy for dataset collection.

    ``speed_cap`` > 0 keeps every collected sequence's mean speed below the
    cap (the low-speed training regime); ``balanced`` spreads episode speed
    targets so all three velocity groups are populated.
    """

    n_sequences: int
    T: int = 50
    speed_cap: float = 0.0
    balanced: bool = False
    episode_steps: int = 240
    stride: int = 25
    margin: float = 24.0
    max_speed_target: float = 7.0

    def __post_init__(self):
        if not self.balanced and self.speed_cap <= 0:
            raise ValueError("need speed_cap > 0 or balanced=True")


YAW_RATE_REGIMES = ((0.0, 0.04), (0.05, 0.12), (0.13, 0.45), (0.3, 1.0))


def _episode_actions(rng: np.random.Generator, n_steps: int, policy: CollectPolicy,
                     params: SimParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Per-episode speed target plus a steering profile.

    Each episode holds a base steering angle chosen to realize a target
    mean yaw rate (sweeping the straight/gentle/aggressive turn-rate
    groups), with slow sign flips to stay on the map and a small
    mean-reverting wiggle on top.
    """
    if policy.balanced:
        v_target = rng.uniform(0.3, policy.max_speed_target)
    else:
        v_target = rng.uniform(0.6, policy.speed_cap * 0.97)
    lo, hi = YAW_RATE_REGIMES[int(rng.integers(0, len(YAW_RATE_REGIMES)))]
    yaw_rate_target = rng.uniform(lo, hi)
    v_ref = max(v_target, 0.5)
    base = np.arctan(yaw_rate_target * params.wheelbase_L / v_ref)
    base = min(base, 0.95 * params.delta_max) * rng.choice([-1.0, 1.0])
    wiggle_amp = rng.uniform(0.01, 0.06)
    theta, dt = 0.6, params.dt
    sigma = wiggle_amp * np.sqrt(2 * theta)
    steer = np.empty(n_steps)
    cur = 0.0
    flip_every = int(rng.integers(60, 140))
    sgn = 1.0
    for t in range(n_steps):
        if (t + 1) % flip_every == 0:
            sgn = -sgn
        cur = cur + theta * (0.0 - cur) * dt + sigma * np.sqrt(dt) * rng.standard_normal()
        steer[t] = np.clip(sgn * base + cur, -params.delta_max, params.delta_max)
    throttle_noise = 0.08 * rng.standard_normal(n_steps)
    return v_target, steer, throttle_noise


def run_episode(terrain: Terrain, params: SimParams, start: SimState,
                v_target: float, steer_targets: np.ndarray,
                throttle_noise: np.ndarray, speed_cap: float = 0.0):
    """Drive the truth model with speed-feedback throttle; returns the
    logged states (length n+1) and actions (length n). Stops early at the
    terrain boundary."""
    states = [start]
    actions = []
    s = start
    for t in range(len(steer_targets)):
        throttle = 0.6 * (v_target - s.u) + throttle_noise[t]
        if speed_cap > 0 and s.u > speed_cap - 0.2:
            throttle = 0.0
        a = np.array([np.clip(throttle, 0.0, 1.0), steer_targets[t]])
        try:
            s = sim_step(s, a, terrain, params)
        except OutOfBoundsError:
            break
        states.append(s)
        actions.append(a)
    return states, np.array(actions) if actions else np.zeros((0, 2))


def collect_dataset(terrain: Terrain, policy: CollectPolicy,
                    rng: np.random.Generator,
                    params: SimParams = SimParams()) -> list[DataSequence]:
    """Slice driven episodes into overlapping sequences with observations.

    Capped mode drops any slice whose mean |forward speed| exceeds the cap
    (selection by speed, the same way a low-speed-only training subset is
    formed); balanced mode fills per-velocity-group quotas of at least a
    fifth of the requested count each.
    """
    T = policy.T
    need = None
    if policy.balanced:
        per = int(np.ceil(policy.n_sequences * 0.25))
        need = {"low": per, "med": per, "high": per}
    out: list[DataSequence] = []
    guard = 0
    while len(out) < policy.n_sequences:
        guard += 1
        if guard > 4000:
            raise RuntimeError("dataset collection failed to reach quota")
        e = terrain.extent
        x0 = rng.uniform(policy.margin, e - policy.margin)
        y0 = rng.uniform(policy.margin, e - policy.margin)
        yaw0 = rng.uniform(-np.pi, np.pi)
        v_target, steer, tnoise = _episode_actions(rng, policy.episode_steps, policy, params)
        u0 = rng.uniform(0.4, 0.95) * v_target
        start = initial_sim_state(x0, y0, yaw0, u0, terrain, params)
        states, actions = run_episode(terrain, params, start, v_target, steer, tnoise,
                                      speed_cap=policy.speed_cap if not policy.balanced else 0.0)
        if len(actions) < T:
            continue
        fulls = [to_full_state(s, terrain) for s in states]
        rows = np.array([f.as_array() for f in fulls])
        for k0 in range(0, len(actions) - T + 1, policy.stride):
            labels = rows[k0 + 1: k0 + 1 + T]
            mean_speed = float(np.mean(np.abs(labels[:, 9])))
            if policy.speed_cap > 0 and not policy.balanced:
                if mean_speed > policy.speed_cap or abs(rows[k0, 9]) > policy.speed_cap:
                    continue
            if need is not None:
                # per-group minimums; surplus slots are filled first-come
                group = "low" if mean_speed <= 3.0 else ("med" if mean_speed <= 5.0 else "high")
                if need[group] > 0:
                    need[group] -= 1
                elif policy.n_sequences - len(out) <= sum(need.values()):
                    continue
            obs = crop_observation(terrain, fulls[k0])
            out.append(DataSequence(
                x0=fulls[k0],
                obs=obs,
                actions=actions[k0: k0 + T].copy(),
                labels=labels.copy(),
            ))
            if len(out) >= policy.n_sequences:
                break
    return out
