"""Extended kinematic bicycle model (KBM) and its midpoint-method rollout.

State is [x, y, psi, v, delta]; actions are [throttle, delta_target].
Beyond the textbook bicycle kinematics, the speed channel models throttle
gain, engine-brake/drag proportional to speed, rolling friction, and
gravity along the pitch direction, and the steering channel follows a
first-order actuation law toward the commanded angle.

All operations are pure functions and accept either a single state
(shape ``(5,)``) or a batch (shape ``(B, 5)``); batched rollouts are what
the sampling controller and the augmentation pipeline use.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple, Sequence

import numpy as np
import yaml

# state vector layout
IX, IY, IPSI, IV, IDELTA = 0, 1, 2, 3, 4
# action vector layout
ITHROTTLE, IDELTA_TARGET = 0, 1


class InvalidStateError(ValueError):
    """Raised when a state, action, or pitch input is not finite."""


class KbmState(NamedTuple):
    """Pose, speed, and current steering angle of the bicycle model."""

    x: float
    y: float
    psi: float
    v: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    @staticmethod
    def from_array(arr: np.ndarray) -> "KbmState":
        return KbmState(*(float(a) for a in np.asarray(arr, dtype=float)))


class ActionCmd(NamedTuple):
    """Throttle command in [0, 1] and target steering angle in radians."""

    throttle: float
    delta_target: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclasses.dataclass(frozen=True)
class KbmParams:
    """Physical constants of the extended bicycle model (SI units)."""

    wheelbase_L: float = 2.0
    K_t: float = 4.0       # m/s^2 per unit throttle
    K_b: float = 0.25      # 1/s, engine brake + linearized drag
    K_f: float = 0.2       # m/s^2 rolling friction deceleration
    K_g: float = 1.0       # gravity scaling (dimensionless)
    g: float = 9.81
    K_s: float = 5.0       # 1/s steering actuation rate
    delta_max: float = 0.52
    dt: float = 0.1

    def __post_init__(self) -> None:
        for name in ("K_t", "K_b", "K_f", "K_g", "K_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dt <= 0 or self.wheelbase_L <= 0:
            raise ValueError("dt and wheelbase_L must be > 0")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(dataclasses.asdict(self), fh, sort_keys=True)

    @staticmethod
    def load(path) -> "KbmParams":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return KbmParams(**raw)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidStateError("non-finite value in KBM input")


def derivative_array(
    state: np.ndarray,
    action: np.ndarray,
    pitch: np.ndarray | float,
    params: KbmParams,
) -> np.ndarray:
    """Time derivative of ``[x, y, psi, v, delta]``; supports batches.

    ``sign(v)`` is 0 at rest so the rest state is a fixed point.
    """
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    psi = state[..., IPSI]
    v = state[..., IV]
    delta = state[..., IDELTA]
    out = np.empty_like(state)
    out[..., IX] = v * np.cos(psi)
    out[..., IY] = v * np.sin(psi)
    out[..., IPSI] = v * np.tan(delta) / params.wheelbase_L
    out[..., IV] = (
        params.K_t * action[..., ITHROTTLE]
        - params.K_b * v
        - params.K_f * np.sign(v) * np.cos(pitch)
        - params.K_g * params.g * np.sin(pitch)
    )
    out[..., IDELTA] = params.K_s * (action[..., IDELTA_TARGET] - delta)
    return out


def step_midpoint_array(
    state: np.ndarray,
    action: np.ndarray,
    pitch: np.ndarray | float,
    params: KbmParams,
) -> np.ndarray:
    """One second-order midpoint step of length ``params.dt``.

    The action and pitch are held over the step; only the state is
    re-evaluated at the half step. Steering is clamped to +-delta_max.
    A friction-driven zero crossing of the speed sticks at zero (the
    sliding-mode solution of the sign-discontinuous friction term), so
    coasting speed magnitude never chatters upward.
    """
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    half = state + (0.5 * params.dt) * derivative_array(state, action, pitch, params)
    out = state + params.dt * derivative_array(half, action, pitch, params)
    out[..., IDELTA] = np.clip(out[..., IDELTA], -params.delta_max, params.delta_max)
    crossed = (state[..., IV] * out[..., IV] < 0.0) | \
              (state[..., IV] * half[..., IV] < 0.0)
    if np.any(crossed):
        rest_accel = (params.K_t * action[..., ITHROTTLE]
                      - params.K_g * params.g * np.sin(pitch))
        sticks = np.abs(rest_accel) <= params.K_f * np.cos(pitch)
        out[..., IV] = np.where(crossed & sticks, 0.0, out[..., IV])
    return out


def rollout_array(
    state: np.ndarray,
    actions: np.ndarray,
    pitch_provider: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
    params: KbmParams,
) -> np.ndarray:
    """Autoregressive midpoint rollout.

    ``state`` is ``(5,)`` or ``(B, 5)``; ``actions`` is ``(T, 2)`` or
    ``(B, T, 2)``. ``pitch_provider(x, y, step)`` is queried at the
    position the vehicle occupies when each step starts. The seed state
    is not part of the returned ``(..., T, 5)`` trajectory.
    """
    state = np.asarray(state, dtype=float)
    actions = np.asarray(actions, dtype=float)
    _check_finite(state, actions)
    T = actions.shape[-2]
    if T < 1:
        raise ValueError("rollout needs at least one action")
    out = np.empty(state.shape[:-1] + (T, 5), dtype=float)
    cur = state
    for t in range(T):
        pitch = pitch_provider(cur[..., IX], cur[..., IY], t)
        cur = step_midpoint_array(cur, actions[..., t, :], pitch, params)
        if not np.all(np.isfinite(cur)):
            raise InvalidStateError(f"KBM rollout diverged at step {t}")
        out[..., t, :] = cur
    return out


def zero_pitch(x: np.ndarray, y: np.ndarray, step: int) -> np.ndarray:
    """Pitch provider for flat ground."""
    return np.zeros_like(np.asarray(x, dtype=float))


def kbm_derivative(
    state: KbmState, action: ActionCmd, pitch: float, params: KbmParams
) -> np.ndarray:
    """Typed wrapper around :func:`derivative_array` for a single state."""
    s, a = state.as_array(), action.as_array()
    _check_finite(s, a, pitch)
    if abs(pitch) >= np.pi / 2:
        raise InvalidStateError("pitch must satisfy |pitch| < pi/2")
    return derivative_array(s, a, float(pitch), params)


def kbm_step_midpoint(
    state: KbmState, action: ActionCmd, pitch: float, params: KbmParams
) -> KbmState:
    s, a = state.as_array(), action.as_array()
    _check_finite(s, a, pitch)
    return KbmState.from_array(step_midpoint_array(s, a, float(pitch), params))


def kbm_rollout(
    state: KbmState,
    actions: Sequence[ActionCmd],
    pitch_provider: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
    params: KbmParams,
) -> list[KbmState]:
    acts = np.array([a.as_array() for a in actions], dtype=float)
    traj = rollout_array(state.as_array(), acts, pitch_provider, params)
    return [KbmState.from_array(row) for row in traj]


TRACE_HEADER = "step,x,y,psi,v,delta"


def write_trace_csv(path, states: np.ndarray, meta: str | None = None) -> None:
    """Export a rollout as CSV with columns ``step,x,y,psi,v,delta``."""
    states = np.asarray(states, dtype=float)
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write(TRACE_HEADER + "\n")
        for i, row in enumerate(states):
            fh.write(",".join([str(i)] + [f"{x:.17g}" for x in row]) + "\n")


def read_trace_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("step"):
                continue
            rows.append([float(tok) for tok in line.split(",")[1:]])
    return np.array(rows, dtype=float)
