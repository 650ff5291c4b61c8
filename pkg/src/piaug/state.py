"""Sixteen-element vehicle state, 6-D rotation representation, and the
height-map observation.

The learned-model state is ``[p(3), r6(6), v(3), w(3), delta]`` where
``r6`` holds the first two columns of the body-to-world rotation matrix
in column-major order, ``v``/``w`` are body-frame linear/angular
velocities, and ``delta`` is the steering angle. The 6-D rotation
representation is continuous (no quaternion double cover) and is
recovered to a full matrix by Gram-Schmidt.

Frames are right-handed with the third axis pointing down and the body
frame front-right-down, so Z-Y-X Euler pitch is positive nose-up and the
gravity term of the speed dynamics decelerates a climbing vehicle.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .kbm import KbmState

# element layout of the flat 16-vector
SL_P = slice(0, 3)
SL_R6 = slice(3, 9)
SL_V = slice(9, 12)
SL_W = slice(12, 15)
I_DELTA = 15
STATE_DIM = 16

IDENTITY_R6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class InvalidRotationError(ValueError):
    """Input matrix is not orthonormal with determinant +1."""


class DegenerateRotationError(ValueError):
    """6-D representation cannot be orthonormalized (near-zero or parallel columns)."""


@dataclasses.dataclass(frozen=True)
class FullState:
    """World position, 6-D rotation, body velocities, and steering angle."""

    p: np.ndarray
    r6: np.ndarray
    v: np.ndarray
    w: np.ndarray
    delta: float

    def as_array(self) -> np.ndarray:
        out = np.empty(STATE_DIM)
        out[SL_P] = self.p
        out[SL_R6] = self.r6
        out[SL_V] = self.v
        out[SL_W] = self.w
        out[I_DELTA] = self.delta
        return out

    @staticmethod
    def from_array(arr: np.ndarray) -> "FullState":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (STATE_DIM,):
            raise ValueError(f"expected shape (16,), got {arr.shape}")
        return FullState(
            p=arr[SL_P].copy(),
            r6=arr[SL_R6].copy(),
            v=arr[SL_V].copy(),
            w=arr[SL_W].copy(),
            delta=float(arr[I_DELTA]),
        )


@dataclasses.dataclass(frozen=True)
class Observation:
    """Robot-centered, yaw-aligned 4-channel height patch.

    ``height_patch[i, j, c]``: ``i`` indexes the forward (body-x) offset,
    ``j`` the rightward (body-y) offset, both increasing; channels are
    ``[min, max, mean, std]`` of terrain altitude relative to the ground
    under the robot. ``out_of_bounds`` is set when any sample fell
    outside the terrain and was edge-padded.
    """

    height_patch: np.ndarray
    resolution: float
    out_of_bounds: bool = False

    PATCH_SIZE = 32


def rot6d_from_matrix(R: np.ndarray) -> np.ndarray:
    """First two columns of ``R``, column-major flattened."""
    R = np.asarray(R, dtype=float)
    err = max(
        np.max(np.abs(R.T @ R - np.eye(3))),
        abs(np.linalg.det(R) - 1.0),
    )
    if err > 1e-6:
        raise InvalidRotationError(f"matrix not a rotation (error {err:.2e})")
    return R[:, :2].T.reshape(6).copy()


def matrix_from_rot6d(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt recovery of the rotation matrix from its first two columns."""
    r6 = np.asarray(r6, dtype=float)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise DegenerateRotationError("first column near zero")
    c1 = a1 / n1
    u2 = a2 - (c1 @ a2) * c1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-8:
        raise DegenerateRotationError("columns near parallel")
    c2 = u2 / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def matrices_from_rot6d(r6: np.ndarray) -> np.ndarray:
    """Batched :func:`matrix_from_rot6d` over ``(..., 6)`` inputs."""
    r6 = np.asarray(r6, dtype=float)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise DegenerateRotationError("first column near zero")
    c1 = a1 / n1
    u2 = a2 - np.sum(c1 * a2, axis=-1, keepdims=True) * c1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise DegenerateRotationError("columns near parallel")
    c2 = u2 / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def rot6d_from_matrices(R: np.ndarray) -> np.ndarray:
    """Batched first-two-columns extraction over ``(..., 3, 3)``."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def matrix_from_euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Body-to-world rotation from Z-Y-X (yaw, pitch, roll) Euler angles."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def yaw_from_matrix(R: np.ndarray) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def pitch_from_rot6d(r6: np.ndarray) -> float:
    """Pitch angle (Z-Y-X convention) from the 6-D rotation representation.

    Values within 0.001 of the gimbal singularity are clamped with a warning.
    """
    R = matrix_from_rot6d(r6)
    s = -R[2, 0]
    if abs(s) > 0.999:
        warnings.warn("pitch extraction near gimbal lock; clamping", RuntimeWarning)
        s = float(np.clip(s, -0.999, 0.999))
    return float(np.arcsin(s))


def full_to_kbm(s: FullState) -> KbmState:
    """Project the 16-element state onto the bicycle-model state space.

    Speed is the body-frame forward component, so lateral slip is
    invisible to the projection and reversing keeps its sign.
    """
    R = matrix_from_rot6d(s.r6)
    return KbmState(
        x=float(s.p[0]),
        y=float(s.p[1]),
        psi=float(np.arctan2(R[1, 0], R[0, 0])),
        v=float(s.v[0]),
        delta=float(s.delta),
    )


def kbm_project_rows(states: np.ndarray) -> np.ndarray:
    """Batched projection of flat 16-vectors to ``[x, y, psi, v, delta]``."""
    states = np.asarray(states, dtype=float)
    R = matrices_from_rot6d(states[..., SL_R6])
    out = np.empty(states.shape[:-1] + (5,))
    out[..., 0] = states[..., 0]
    out[..., 1] = states[..., 1]
    out[..., 2] = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    out[..., 3] = states[..., 9]
    out[..., 4] = states[..., I_DELTA]
    return out


def scale_velocity(s: FullState, factor: float) -> FullState:
    """Scale all linear and angular velocity components uniformly."""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    return FullState(
        p=s.p.copy(),
        r6=s.r6.copy(),
        v=factor * s.v,
        w=factor * s.w,
        delta=s.delta,
    )


def wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


# subsamples per patch cell (per axis) when aggregating terrain heights
CELL_SUBSAMPLES = 4


def crop_observation(
    terrain,
    s: FullState,
    size: int = Observation.PATCH_SIZE,
    resolution: float = 0.5,
) -> Observation:
    """Crop a robot-centered, yaw-aligned height-statistics patch.

    ``terrain`` needs ``height_at(x, y)`` (vectorized, edge-clamping) and
    ``contains(x, y)``. Each patch cell aggregates a 4x4 grid of terrain
    samples into [min, max, mean, std]; heights are offset so the ground
    under the robot reads zero.
    """
    R = matrices_from_rot6d(s.r6)
    yaw = np.arctan2(R[1, 0], R[0, 0])
    cy, sy = np.cos(yaw), np.sin(yaw)

    k = CELL_SUBSAMPLES
    half = size * resolution / 2.0
    # cell-center offsets, then sub-offsets inside each cell
    centers = (np.arange(size) + 0.5) * resolution - half
    sub = (np.arange(k) + 0.5) * (resolution / k) - resolution / 2.0
    fx = (centers[:, None] + sub[None, :]).reshape(size, 1, k, 1)
    fy = (centers[:, None] + sub[None, :]).reshape(1, size, 1, k)
    bx = np.broadcast_to(fx, (size, size, k, k))
    by = np.broadcast_to(fy, (size, size, k, k))

    wx = s.p[0] + cy * bx - sy * by
    wy = s.p[1] + sy * bx + cy * by
    oob = not bool(np.all(terrain.contains(wx, wy)))
    h = terrain.height_at(wx, wy) - terrain.height_at(s.p[0], s.p[1])

    flat = h.reshape(size, size, k * k)
    patch = np.stack(
        [flat.min(axis=-1), flat.max(axis=-1), flat.mean(axis=-1), flat.std(axis=-1)],
        axis=-1,
    )
    return Observation(height_patch=patch, resolution=resolution, out_of_bounds=oob)
