"""Velocity-scaling augmentation: turn low-speed training sequences into
higher-speed ones whose multi-step labels come from the bicycle model.

Each raw sequence keeps its observation and (by default) its actions; the
initial state's linear and angular velocities are scaled by a factor drawn
uniformly from [scale_lo, scale_hi], and the label trajectory is produced
by rolling the kinematic model out from the scaled state with terrain
pitch queried along the rolled path. Scaled sequences carry bicycle-state
labels only.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from . import kbm
from .kbm import KbmParams
from .state import FullState, Observation, full_to_kbm, scale_velocity


@dataclasses.dataclass(frozen=True)
class DataSequence:
    """One training/evaluation sample: initial state, observation, action
    horizon, and the ground-truth future states (rows of flat 16-vectors)."""

    x0: FullState
    obs: Observation
    actions: np.ndarray   # (T, 2)
    labels: np.ndarray    # (T, 16)

    def __post_init__(self):
        if self.actions.shape[0] != self.labels.shape[0]:
            raise ValueError("actions and labels must share the horizon length")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclasses.dataclass(frozen=True)
class AugmentedSequence:
    """Scaled-velocity sequence with bicycle-model labels.

    ``source_index`` is the position of the raw sequence inside the batch
    it was generated from (dropped sequences leave gaps), which lets the
    trainer reuse the raw observation encodings.
    """

    x0: FullState
    obs: Observation
    actions: np.ndarray      # (T, 2)
    kbm_labels: np.ndarray   # (T, 5)
    scale: float
    source_index: int = 0


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    scale_lo: float = 2.5
    scale_hi: float = 4.0
    action_mode: str = "reuse-raw"   # or "ornstein-uhlenbeck"
    ou_theta: tuple[float, float] = (0.6, 0.8)
    ou_sigma: tuple[float, float] = (0.25, 0.12)
    ou_mu: tuple[float, float] = (0.5, 0.0)
    ou_dt: float = 0.1
    delta_max: float = 0.52
    seed: int = 0
    divergence_speed: float = 30.0

    def __post_init__(self):
        if not (0 < self.scale_lo <= self.scale_hi):
            raise ValueError("need 0 < scale_lo <= scale_hi")
        if self.action_mode not in ("reuse-raw", "ornstein-uhlenbeck"):
            raise ValueError(f"unknown action_mode {self.action_mode!r}")


def sample_ou_actions(T: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Mean-reverting random action sequence, clamped to the action bounds."""
    theta = np.asarray(cfg.ou_theta, dtype=float)
    sigma = np.asarray(cfg.ou_sigma, dtype=float)
    mu = np.asarray(cfg.ou_mu, dtype=float)
    dt = cfg.ou_dt
    lo = np.array([0.0, -cfg.delta_max])
    hi = np.array([1.0, cfg.delta_max])
    u = mu.copy()
    out = np.empty((T, 2))
    for t in range(T):
        xi = rng.standard_normal(2)
        u = u + theta * (mu - u) * dt + sigma * np.sqrt(dt) * xi
        u = np.clip(u, lo, hi)
        out[t] = u
    return out


def augment_batch(
    batch: Sequence[DataSequence],
    cfg: AugmentConfig,
    terrain_pitch: Callable,
    rng: np.random.Generator,
    params: KbmParams = KbmParams(),
) -> tuple[list[AugmentedSequence], int]:
    """Scale every sequence's initial velocities and roll bicycle labels.

    ``terrain_pitch(x, y, heading)`` supplies the slope along the rolled
    path (vectorized over the batch). Sequences whose label rollout
    diverges are dropped; the second return value counts them. The input
    batch is never mutated.
    """
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    T = batch[0].horizon
    scales = rng.uniform(cfg.scale_lo, cfg.scale_hi, size=B)

    if cfg.action_mode == "reuse-raw":
        actions = np.stack([seq.actions for seq in batch])  # (B, T, 2)
    else:
        actions = np.stack([sample_ou_actions(T, cfg, rng) for _ in range(B)])

    scaled_states = [scale_velocity(seq.x0, s) for seq, s in zip(batch, scales)]
    cur = np.stack([full_to_kbm(fs).as_array() for fs in scaled_states])  # (B, 5)

    labels = np.empty((B, T, 5))
    for t in range(T):
        pitch = terrain_pitch(cur[:, kbm.IX], cur[:, kbm.IY], cur[:, kbm.IPSI])
        cur = kbm.step_midpoint_array(cur, actions[:, t, :], pitch, params)
        labels[:, t, :] = cur

    finite = np.all(np.isfinite(labels), axis=(1, 2))
    bounded = np.all(np.abs(labels[:, :, kbm.IV]) <= cfg.divergence_speed, axis=1)
    keep = finite & bounded
    out = [
        AugmentedSequence(
            x0=scaled_states[i],
            obs=batch[i].obs,
            actions=actions[i].copy(),
            kbm_labels=labels[i],
            scale=float(scales[i]),
            source_index=i,
        )
        for i in range(B)
        if keep[i]
    ]
    return out, int(B - keep.sum())


SPEED_BIN_EDGES = np.arange(-2.0, 14.0 + 1e-9, 0.5)


def speed_histogram(seqs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Densities of initial and mean speeds over fixed 0.5 m/s bins.

    Accepts raw sequences (full-state labels) or augmented ones
    (bicycle-state labels). Returns (bin_edges, density_initial,
    density_mean); densities integrate to 1 over the binned range.
    """
    if not len(seqs):
        raise ValueError("no sequences")
    initial, mean = [], []
    for s in seqs:
        if isinstance(s, AugmentedSequence):
            initial.append(full_to_kbm(s.x0).v)
            mean.append(float(np.mean(s.kbm_labels[:, kbm.IV])))
        else:
            initial.append(full_to_kbm(s.x0).v)
            mean.append(float(np.mean(s.labels[:, 9])))
    d_init, _ = np.histogram(initial, bins=SPEED_BIN_EDGES, density=True)
    d_mean, _ = np.histogram(mean, bins=SPEED_BIN_EDGES, density=True)
    return SPEED_BIN_EDGES, d_init, d_mean


def write_histogram_csv(path, edges, raw_init, raw_mean, aug_init, aug_mean,
                        meta: str | None = None) -> None:
    """Histogram CSV used to reproduce the speed-distribution figure."""
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("bin_lo,bin_hi,density_raw_initial,density_raw_mean,"
                 "density_aug_initial,density_aug_mean\n")
        for i in range(len(edges) - 1):
            fh.write(
                f"{edges[i]:.17g},{edges[i + 1]:.17g},{raw_init[i]:.17g},"
                f"{raw_mean[i]:.17g},{aug_init[i]:.17g},{aug_mean[i]:.17g}\n"
            )
