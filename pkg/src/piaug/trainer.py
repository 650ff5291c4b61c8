"""Mini-batch training: data loss on raw sequences, physics loss on the
configured physics batch (raw for the plain physics-informed mode,
velocity-scaled for the augmented mode), Adam updates, and a built-in
finite-difference gradient verifier.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from . import kbm, model
from .augment import AugmentConfig, DataSequence, augment_batch
from .kbm import KbmParams
from .model import LossBreakdown, ModelParams
from .state import full_to_kbm

MODES = ("vanilla", "pinn", "piaug")


class GradCheckError(RuntimeError):
    """Analytic and finite-difference gradients disagree."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    mode: str = "piaug"
    lambda_pi: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    horizon: int = 50
    seed: int = 0
    hidden: int = 128
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def effective_lambda(self) -> float:
        # the plain data-driven variant trains with zero physics weight
        return 0.0 if self.mode == "vanilla" else self.lambda_pi


@dataclasses.dataclass
class TrainingBatch:
    """Raw sequences plus the physics batch evaluated against KBM labels.

    ``phys_obs_idx`` indexes observations shared with the raw batch so a
    single encoding pass serves both loss terms. ``phys_is_raw`` marks the
    case where the physics loss is evaluated on the raw rollout itself.
    """

    x0: np.ndarray            # (B, 16)
    patches: np.ndarray       # (B, 32, 32, 4)
    actions: np.ndarray       # (B, T, 2)
    labels: np.ndarray        # (B, T, 16)
    phys_x0: np.ndarray | None = None
    phys_actions: np.ndarray | None = None
    phys_kbm_labels: np.ndarray | None = None
    phys_obs_idx: np.ndarray | None = None
    phys_is_raw: bool = False


def sequences_to_arrays(seqs: Sequence[DataSequence]):
    x0 = np.array([s.x0.as_array() for s in seqs])
    patches = np.array([s.obs.height_patch for s in seqs])
    actions = np.array([s.actions for s in seqs])
    labels = np.array([s.labels for s in seqs])
    return x0, patches, actions, labels


def kbm_labels_from_raw(x0_rows: np.ndarray, actions: np.ndarray,
                        terrain_pitch: Callable, params: KbmParams) -> np.ndarray:
    """KBM rollout labels seeded at the raw initial states (physics batch of
    the non-augmented physics-informed mode)."""
    cur = np.empty((x0_rows.shape[0], 5))
    for i, row in enumerate(x0_rows):
        from .state import FullState
        cur[i] = full_to_kbm(FullState.from_array(row)).as_array()
    T = actions.shape[1]
    out = np.empty((x0_rows.shape[0], T, 5))
    for t in range(T):
        pitch = terrain_pitch(cur[:, kbm.IX], cur[:, kbm.IY], cur[:, kbm.IPSI])
        cur = kbm.step_midpoint_array(cur, actions[:, t, :], pitch, params)
        out[:, t, :] = cur
    return out


def batch_loss(params: ModelParams, tb: TrainingBatch, lambda_pi: float) -> LossBreakdown:
    """Loss-only evaluation (used by the finite-difference verifier)."""
    latents = model.encode_batch(params, tb.patches)
    preds = model.rollout(params, tb.x0, latents, tb.actions)
    l_data = model.loss_data(preds, tb.labels)
    l_phys = 0.0
    if tb.phys_kbm_labels is not None:
        if tb.phys_is_raw:
            l_phys, _ = model.loss_physics(preds, tb.phys_kbm_labels)
        else:
            phys_preds = model.rollout(params, tb.phys_x0, latents[tb.phys_obs_idx],
                                       tb.phys_actions)
            l_phys, _ = model.loss_physics(phys_preds, tb.phys_kbm_labels)
    return LossBreakdown(l_data=l_data, l_phys=l_phys, lambda_pi=lambda_pi)


def batch_loss_and_grads(params: ModelParams, tb: TrainingBatch, lambda_pi: float
                         ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Exact reverse-mode gradient of the combined loss for every weight."""
    grads = model.zero_grads(params)
    enc_cache: dict = {}
    latents = model.encode_batch(params, tb.patches, enc_cache)
    raw_cache: list = []
    preds = model.rollout(params, tb.x0, latents, tb.actions, raw_cache)
    l_data, g_preds = model.loss_data_grad(preds, tb.labels)
    l_phys = 0.0
    g_latent_extra = None
    phys_backprop = None
    if tb.phys_kbm_labels is not None:
        if tb.phys_is_raw:
            l_phys, g_lp, _ = model.loss_physics_grad(preds, tb.phys_kbm_labels)
            if lambda_pi != 0.0:
                g_preds = g_preds + lambda_pi * g_lp
        else:
            phys_cache: list = []
            phys_preds = model.rollout(params, tb.phys_x0, latents[tb.phys_obs_idx],
                                       tb.phys_actions, phys_cache)
            l_phys, g_lp, _ = model.loss_physics_grad(phys_preds, tb.phys_kbm_labels)
            if lambda_pi != 0.0:
                phys_backprop = (phys_cache, lambda_pi * g_lp)
    g_latent = model.rollout_backward(params, raw_cache, g_preds, grads)
    if phys_backprop is not None:
        phys_cache, g_lp_scaled = phys_backprop
        g_lat_phys = model.rollout_backward(params, phys_cache, g_lp_scaled, grads)
        np.add.at(g_latent, tb.phys_obs_idx, g_lat_phys)
    model.encoder_backward(params, enc_cache, g_latent, grads)
    return LossBreakdown(l_data=l_data, l_phys=l_phys, lambda_pi=lambda_pi), grads


class Adam:
    """Adaptive-moment gradient descent on the named weight arrays."""

    def __init__(self, params: ModelParams, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = model.zero_grads(params)
        self.v = model.zero_grads(params)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in ModelParams.WEIGHT_FIELDS:
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mh = self.m[name] / c1
            vh = self.v[name] / c2
            getattr(params, name)[...] -= self.lr * mh / (np.sqrt(vh) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array([float(self.t)])}
        for n in ModelParams.WEIGHT_FIELDS:
            out[f"adam_m_{n}"] = self.m[n]
            out[f"adam_v_{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.t = int(arrs["adam_t"][0])
        for n in ModelParams.WEIGHT_FIELDS:
            self.m[n] = arrs[f"adam_m_{n}"].copy()
            self.v[n] = arrs[f"adam_v_{n}"].copy()


@dataclasses.dataclass
class TrainResult:
    params: ModelParams
    log: list[tuple[int, LossBreakdown]]
    aborted: bool = False
    optimizer: Adam | None = None


def make_training_batch(seqs: list[DataSequence], idx: np.ndarray, mode: str,
                        aug_cfg: AugmentConfig, terrain_pitch: Callable | None,
                        kbm_params: KbmParams, rng: np.random.Generator,
                        pinn_labels: np.ndarray | None = None) -> TrainingBatch:
    sub = [seqs[i] for i in idx]
    x0, patches, actions, labels = sequences_to_arrays(sub)
    tb = TrainingBatch(x0=x0, patches=patches, actions=actions, labels=labels)
    if mode == "pinn":
        tb.phys_kbm_labels = pinn_labels[idx]
        tb.phys_is_raw = True
    elif mode == "piaug":
        aug, _dropped = augment_batch(sub, aug_cfg, terrain_pitch, rng, kbm_params)
        if aug:
            tb.phys_x0 = np.array([a.x0.as_array() for a in aug])
            tb.phys_actions = np.array([a.actions for a in aug])
            tb.phys_kbm_labels = np.array([a.kbm_labels for a in aug])
            tb.phys_obs_idx = np.array([a.source_index for a in aug])
    return tb


def train(sequences: list[DataSequence], cfg: TrainConfig,
          terrain_pitch: Callable | None = None,
          aug_cfg: AugmentConfig = AugmentConfig(),
          kbm_params: KbmParams = KbmParams(),
          tag: str = "train",
          start: TrainResult | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Run the configured number of epochs and return final parameters plus
    the per-epoch loss log. Aborts (keeping the last finite-loss parameters)
    if the loss diverges.
    """
    if tag != "train":
        raise ValueError(f"refusing to train on a dataset tagged {tag!r}")
    if not sequences:
        raise ValueError("empty dataset")
    if cfg.mode in ("pinn", "piaug") and terrain_pitch is None:
        raise ValueError(f"mode {cfg.mode} needs a terrain pitch source")
    lam = cfg.effective_lambda

    if start is not None:
        params = start.params
        opt = start.optimizer or Adam(params, cfg.learning_rate)
        log = list(start.log)
    else:
        params = model.init_params(cfg.seed, hidden=cfg.hidden)
        opt = Adam(params, cfg.learning_rate)
        log = []
    # separate streams so augmentation draws don't perturb batch order
    rng = np.random.default_rng(np.random.SeedSequence([51423, cfg.seed, start_epoch]))
    rng_aug = np.random.default_rng(np.random.SeedSequence([51424, cfg.seed, start_epoch]))

    pinn_labels = None
    if cfg.mode == "pinn":
        x0, _, actions, _ = sequences_to_arrays(sequences)
        pinn_labels = kbm_labels_from_raw(x0, actions, terrain_pitch, kbm_params)

    n = len(sequences)
    steps = max(1, n // cfg.batch_size)
    last_good = params.copy()
    aborted = False
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(n)
        ld_sum = lp_sum = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            tb = make_training_batch(sequences, idx, cfg.mode, aug_cfg,
                                     terrain_pitch, kbm_params, rng_aug, pinn_labels)
            breakdown, grads = batch_loss_and_grads(params, tb, lam)
            if not np.isfinite(breakdown.l_total):
                aborted = True
                break
            opt.step(params, grads)
            ld_sum += breakdown.l_data
            lp_sum += breakdown.l_phys
        if aborted:
            params = last_good
            break
        log.append((epoch, LossBreakdown(l_data=ld_sum / steps, l_phys=lp_sum / steps,
                                         lambda_pi=lam)))
        last_good = params.copy()
    return TrainResult(params=params, log=log, aborted=aborted, optimizer=opt)


def write_loss_log_csv(path, log, meta: str | None = None) -> None:
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("epoch,l_data,l_phys,l_total\n")
        for epoch, b in log:
            fh.write(f"{epoch},{b.l_data:.17g},{b.l_phys:.17g},{b.l_total:.17g}\n")


def build_frozen_batch(sequences: list[DataSequence], terrain_pitch: Callable,
                       kbm_params: KbmParams = KbmParams(),
                       n: int = 4, T: int = 5) -> TrainingBatch:
    """Small fixed batch (scaled physics part included) for gradient checks."""
    sub = sequences[:n]
    x0, patches, actions, labels = sequences_to_arrays(sub)
    actions, labels = actions[:, :T], labels[:, :T]
    tb = TrainingBatch(x0=x0, patches=patches, actions=actions, labels=labels)
    rng = np.random.default_rng(7)
    short = [DataSequence(x0=s.x0, obs=s.obs, actions=s.actions[:T],
                          labels=s.labels[:T]) for s in sub]
    aug, _ = augment_batch(short, AugmentConfig(), terrain_pitch, rng, kbm_params)
    tb.phys_x0 = np.array([a.x0.as_array() for a in aug])
    tb.phys_actions = np.array([a.actions for a in aug])
    tb.phys_kbm_labels = np.array([a.kbm_labels for a in aug])
    tb.phys_obs_idx = np.array([a.source_index for a in aug])
    return tb


def grad_verify(params: ModelParams, frozen_batch: TrainingBatch,
                eps: float = 1e-5, lambda_pi: float = 1.0) -> float:
    """Compare analytic and central-difference gradients for every weight.

    The relative error denominator is floored at a small fraction of the
    gradient's overall scale so finite-difference noise on near-zero
    entries cannot dominate. Raises above 1e-3.
    """
    _, grads = batch_loss_and_grads(params, frozen_batch, lambda_pi)
    ga = np.concatenate([grads[n].ravel() for n in ModelParams.WEIGHT_FIELDS])
    floor = 1e-4 * (1.0 + float(np.max(np.abs(ga))))
    base = params.flat()
    work = params.copy()
    max_rel = 0.0
    for i in range(base.size):
        vec = base.copy()
        vec[i] += eps
        work.set_flat(vec)
        lp = batch_loss(work, frozen_batch, lambda_pi).l_total
        vec[i] -= 2 * eps
        work.set_flat(vec)
        lm = batch_loss(work, frozen_batch, lambda_pi).l_total
        gfd = (lp - lm) / (2 * eps)
        rel = abs(ga[i] - gfd) / max(abs(ga[i]), abs(gfd), floor)
        if rel > max_rel:
            max_rel = rel
    if max_rel > 1e-3:
        raise GradCheckError(f"max relative gradient error {max_rel:.3e} > 1e-3")
    return max_rel
