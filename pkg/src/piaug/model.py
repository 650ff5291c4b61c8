"""Learned one-step vehicle dynamics: a height-patch encoder feeding an
autoregressive delta predictor, with exact hand-written reverse-mode
gradients and the data/physics loss pair.

The predictor consumes the state expressed in its own body-local frame
(position zeroed, rotation yaw-canonicalized, velocities already body
frame) plus the encoded observation and the action, and emits a bounded
16-element delta. Position and rotation deltas are applied in the body
frame and mapped to world; the rotation increment is re-orthonormalized
by the Gram-Schmidt recovery so every predicted rotation stays on the
manifold. All arithmetic is 64-bit and deterministic.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .state import IDENTITY_R6, STATE_DIM, wrap_angle

LATENT_DIM = 32
INPUT_DIM = STATE_DIM + LATENT_DIM + 2


class TrainingDivergenceError(RuntimeError):
    """A rollout produced a non-finite activation."""

    def __init__(self, step: int):
        super().__init__(f"non-finite activation at rollout step {step}")
        self.step = step


@dataclasses.dataclass(frozen=True)
class NormConfig:
    """Fixed physical input ranges and per-element output delta scales.

    Ranges are physical, not dataset statistics, because scaled-velocity
    training data exceeds dataset statistics by construction.
    """

    v_scale: float = 12.0
    w_scale: float = 4.0
    delta_scale: float = 0.6
    obs_height_scale: float = 2.0   # meters mapped to ~unit range
    obs_std_scale: float = 0.5
    out_scale: tuple = (
        1.6, 0.8, 0.5,                 # body position delta (m)
        0.4, 0.4, 0.4, 0.4, 0.4, 0.4,  # rotation-increment columns
        1.2, 0.9, 0.9,                 # body velocity delta (m/s)
        0.9, 0.9, 0.9,                 # body angular velocity delta (rad/s)
        0.6,                           # steering delta (rad)
    )


@dataclasses.dataclass
class ModelParams:
    """Encoder + predictor weights and the fixed normalization constants."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    norm: NormConfig = NormConfig()

    WEIGHT_FIELDS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
                     "w1", "b1", "w2", "b2", "w3", "b3")

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.WEIGHT_FIELDS}

    def param_count(self) -> int:
        return int(sum(getattr(self, n).size for n in self.WEIGHT_FIELDS))

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.WEIGHT_FIELDS])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for n in self.WEIGHT_FIELDS:
            arr = getattr(self, n)
            arr[...] = vec[i:i + arr.size].reshape(arr.shape)
            i += arr.size

    def copy(self) -> "ModelParams":
        kw = {n: getattr(self, n).copy() for n in self.WEIGHT_FIELDS}
        return ModelParams(norm=self.norm, **kw)

    @property
    def out_scale_arr(self) -> np.ndarray:
        return np.asarray(self.norm.out_scale, dtype=float)


def init_params(seed: int, hidden: int = 128, enc_hidden: int = 64,
                norm: NormConfig = NormConfig()) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([90210, seed]))

    def layer(nin, nout):
        return rng.standard_normal((nin, nout)) / np.sqrt(nin), np.zeros(nout)

    enc_w1, enc_b1 = layer(256, enc_hidden)
    enc_w2, enc_b2 = layer(enc_hidden, LATENT_DIM)
    w1, b1 = layer(INPUT_DIM, hidden)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(hidden, STATE_DIM)
    # small output layer keeps initial deltas near zero
    w3 *= 0.1
    return ModelParams(enc_w1=enc_w1, enc_b1=enc_b1, enc_w2=enc_w2, enc_b2=enc_b2,
                       w1=w1, b1=b1, w2=w2, b2=b2, w3=w3, b3=b3, norm=norm)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(getattr(params, n)) for n in ModelParams.WEIGHT_FIELDS}


def _affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # single-row GEMMs hit a different BLAS kernel; pad so per-sample and
    # batched evaluation stay bitwise identical
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ W)[:1] + b
    return x @ W + b


def _matmul_rowsafe(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


# ---------------------------------------------------------------------------
# observation encoder


def pool_patch(patch: np.ndarray, norm: NormConfig) -> np.ndarray:
    """Average-pool (..., 32, 32, 4) to (..., 8, 8, 4), scale channels, flatten."""
    patch = np.asarray(patch, dtype=float)
    lead = patch.shape[:-3]
    pooled = patch.reshape(lead + (8, 4, 8, 4, 4)).mean(axis=(-4, -2))
    scale = np.array([1.0 / norm.obs_height_scale] * 3 + [1.0 / norm.obs_std_scale])
    return (pooled * scale).reshape(lead + (256,))


# diagnostic counter: lets tests assert the shared-encoding path encodes once
ENCODE_CALLS = 0


def encode_batch(params: ModelParams, patches: np.ndarray, cache: dict | None = None
                 ) -> np.ndarray:
    """Encode (B, 32, 32, 4) patches to (B, 32) latents."""
    global ENCODE_CALLS
    ENCODE_CALLS += 1
    x = pool_patch(patches, params.norm)
    e1 = np.tanh(_affine(x, params.enc_w1, params.enc_b1))
    lat = np.tanh(_affine(e1, params.enc_w2, params.enc_b2))
    if cache is not None:
        cache.update(x=x, e1=e1, lat=lat)
    return lat


def encode_obs(params: ModelParams, obs) -> np.ndarray:
    """Deterministic 32-d latent for one observation."""
    return encode_batch(params, obs.height_patch[None])[0]


def encoder_backward(params: ModelParams, cache: dict, g_lat: np.ndarray,
                     grads: dict[str, np.ndarray]) -> None:
    ga2 = g_lat * (1.0 - cache["lat"] ** 2)
    grads["enc_w2"] += cache["e1"].T @ ga2
    grads["enc_b2"] += ga2.sum(axis=0)
    ge1 = _matmul_rowsafe(ga2, params.enc_w2.T)
    ga1 = ge1 * (1.0 - cache["e1"] ** 2)
    grads["enc_w1"] += cache["x"].T @ ga1
    grads["enc_b1"] += ga1.sum(axis=0)


# ---------------------------------------------------------------------------
# body-local input features


def _canonical_features(R: np.ndarray) -> tuple[np.ndarray, dict]:
    """Yaw-free rotation features: first two columns of Rz(-yaw) @ R.

    Row 1 of the result is identically [h, 0] with h = hypot(R00, R10),
    so the six features reduce to [h, 0, R20, f3, f4, R21].
    """
    x00, x10 = R[:, 0, 0], R[:, 1, 0]
    h = np.sqrt(x00 * x00 + x10 * x10)
    cy, sy = x00 / h, x10 / h
    f3 = cy * R[:, 0, 1] + sy * R[:, 1, 1]
    f4 = -sy * R[:, 0, 1] + cy * R[:, 1, 1]
    feats = np.stack([h, np.zeros_like(h), R[:, 2, 0], f3, f4, R[:, 2, 1]], axis=1)
    ctx = dict(h=h, cy=cy, sy=sy, x00=x00, x10=x10, R01=R[:, 0, 1], R11=R[:, 1, 1])
    return feats, ctx


def _canonical_features_backward(ctx: dict, g: np.ndarray, gR: np.ndarray) -> None:
    """Accumulate d(features)/dR into gR (in place)."""
    h, cy, sy = ctx["h"], ctx["cy"], ctx["sy"]
    R01, R11 = ctx["R01"], ctx["R11"]
    gf0, gf2, gf3, gf4, gf5 = g[:, 0], g[:, 2], g[:, 3], g[:, 4], g[:, 5]
    gR[:, 2, 0] += gf2
    gR[:, 2, 1] += gf5
    gR[:, 0, 1] += cy * gf3 - sy * gf4
    gR[:, 1, 1] += sy * gf3 + cy * gf4
    g_cy = R01 * gf3 + R11 * gf4
    g_sy = R11 * gf3 - R01 * gf4
    g_h = gf0 - (g_cy * ctx["x00"] + g_sy * ctx["x10"]) / (h * h)
    g_x00 = g_cy / h + g_h * cy
    g_x10 = g_sy / h + g_h * sy
    gR[:, 0, 0] += g_x00
    gR[:, 1, 0] += g_x10


# ---------------------------------------------------------------------------
# rotation-increment Gram-Schmidt


def _gs6(a: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched Gram-Schmidt of (B, 6) column pairs into (B, 3, 3) rotations."""
    a1, a2 = a[:, :3], a[:, 3:]
    n1 = np.linalg.norm(a1, axis=1, keepdims=True)
    c1 = a1 / n1
    dot = np.sum(c1 * a2, axis=1, keepdims=True)
    u2 = a2 - dot * c1
    n2 = np.linalg.norm(u2, axis=1, keepdims=True)
    c2 = u2 / n2
    c3 = np.cross(c1, c2)
    G = np.stack([c1, c2, c3], axis=2)
    ctx = dict(a2=a2, n1=n1, c1=c1, dot=dot, n2=n2, c2=c2)
    return G, ctx


def _gs6_backward(ctx: dict, gG: np.ndarray) -> np.ndarray:
    c1, c2 = ctx["c1"], ctx["c2"]
    gc1 = gG[:, :, 0].copy()
    gc2 = gG[:, :, 1].copy()
    gc3 = gG[:, :, 2]
    gc1 += np.cross(c2, gc3)
    gc2 += np.cross(gc3, c1)
    gu2 = (gc2 - c2 * np.sum(c2 * gc2, axis=1, keepdims=True)) / ctx["n2"]
    ga2 = gu2.copy()
    gdot = -np.sum(c1 * gu2, axis=1, keepdims=True)
    gc1 += -ctx["dot"] * gu2
    gc1 += gdot * ctx["a2"]
    ga2 += gdot * c1
    ga1 = (gc1 - c1 * np.sum(c1 * gc1, axis=1, keepdims=True)) / ctx["n1"]
    return np.concatenate([ga1, ga2], axis=1)


# ---------------------------------------------------------------------------
# autoregressive rollout


def _build_inputs(params: ModelParams, R, v, w, delta, latent, actions_t):
    feats, ctx = _canonical_features(R)
    B = R.shape[0]
    n = params.norm
    inp = np.empty((B, INPUT_DIM))
    inp[:, 0:3] = 0.0  # position in the body-local frame is identically zero
    inp[:, 3:9] = feats
    inp[:, 9:12] = v / n.v_scale
    inp[:, 12:15] = w / n.w_scale
    inp[:, 15] = delta / n.delta_scale
    inp[:, 16:48] = latent
    inp[:, 48] = actions_t[:, 0]
    inp[:, 49] = actions_t[:, 1] / n.delta_scale
    return inp, ctx


def rollout(params: ModelParams, x0_rows: np.ndarray, latent: np.ndarray,
            actions: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Autoregressive prediction of the next T states.

    ``x0_rows`` is (B, 16), ``latent`` (B, 32), ``actions`` (B, T, 2);
    returns (B, T, 16). Each step re-derives the rotation matrix from the
    stored 6-vector, so the rollout is a pure function of the exposed
    16-element state and chaining single steps reproduces a multi-step
    call bitwise. Pass a list as ``cache`` to record the intermediates
    needed by :func:`rollout_backward`.
    """
    rows = np.asarray(x0_rows, dtype=float)
    B, T = actions.shape[0], actions.shape[1]
    out_scale = params.out_scale_arr
    preds = np.empty((B, T, STATE_DIM))
    for t in range(T):
        R, gs_in_ctx = _gs6(rows[:, 3:9])
        v = rows[:, 9:12]
        w = rows[:, 12:15]
        delta = rows[:, 15]
        inp, feat_ctx = _build_inputs(params, R, v, w, delta, latent, actions[:, t, :])
        h1 = np.tanh(_affine(inp, params.w1, params.b1))
        h2 = np.tanh(_affine(h1, params.w2, params.b2))
        draw = np.tanh(_affine(h2, params.w3, params.b3))
        d = draw * out_scale
        dp, dr6 = d[:, 0:3], d[:, 3:9]
        G, gs_ctx = _gs6(IDENTITY_R6 + dr6)
        R_next = R @ G
        row = np.empty((B, STATE_DIM))
        row[:, 0:3] = rows[:, 0:3] + (R @ dp[:, :, None])[:, :, 0]
        row[:, 3:6] = R_next[:, :, 0]
        row[:, 6:9] = R_next[:, :, 1]
        row[:, 9:12] = v + d[:, 9:12]
        row[:, 12:15] = w + d[:, 12:15]
        row[:, 15] = delta + d[:, 15]
        if not np.all(np.isfinite(row)):
            raise TrainingDivergenceError(t)
        preds[:, t, :] = row
        if cache is not None:
            cache.append(dict(inp=inp, feat_ctx=feat_ctx, h1=h1, h2=h2, draw=draw,
                              gs_ctx=gs_ctx, gs_in_ctx=gs_in_ctx, R=R, G=G, dp=dp))
        rows = row
    return preds


def forward(params: ModelParams, x0_row: np.ndarray, latent: np.ndarray,
            actions: np.ndarray) -> np.ndarray:
    """Single-sequence rollout: (16,), (32,), (T, 2) -> (T, 16)."""
    return rollout(params, x0_row[None], latent[None], actions[None])[0]


def rollout_backward(params: ModelParams, cache: list, g_preds: np.ndarray,
                     grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backpropagate through the unrolled rollout.

    ``g_preds`` is (B, T, 16); weight gradients accumulate into ``grads``;
    returns the latent adjoint (B, 32).
    """
    T = len(cache)
    B = g_preds.shape[0]
    out_scale = params.out_scale_arr
    g_rows = np.zeros((B, STATE_DIM))
    g_latent = np.zeros((B, LATENT_DIM))
    for t in range(T - 1, -1, -1):
        c = cache[t]
        g_next = g_rows + g_preds[:, t, :]
        gp_next = g_next[:, 0:3]
        gRn = np.zeros((B, 3, 3))
        gRn[:, :, 0] = g_next[:, 3:6]
        gRn[:, :, 1] = g_next[:, 6:9]
        gv = g_next[:, 9:12].copy()
        gw = g_next[:, 12:15].copy()
        gdelta = g_next[:, 15].copy()

        R, G, dp = c["R"], c["G"], c["dp"]
        # R_next = R @ G ; p_next = p + R @ dp
        gR = gRn @ np.transpose(G, (0, 2, 1))
        gG = np.transpose(R, (0, 2, 1)) @ gRn
        gR += gp_next[:, :, None] * dp[:, None, :]
        g_dp = (np.transpose(R, (0, 2, 1)) @ gp_next[:, :, None])[:, :, 0]
        g_dr6 = _gs6_backward(c["gs_ctx"], gG)

        g_d = np.empty((B, STATE_DIM))
        g_d[:, 0:3] = g_dp
        g_d[:, 3:9] = g_dr6
        g_d[:, 9:12] = gv
        g_d[:, 12:15] = gw
        g_d[:, 15] = gdelta
        g_draw = g_d * out_scale
        ga3 = g_draw * (1.0 - c["draw"] ** 2)
        grads["w3"] += c["h2"].T @ ga3
        grads["b3"] += ga3.sum(axis=0)
        gh2 = _matmul_rowsafe(ga3, params.w3.T)
        ga2 = gh2 * (1.0 - c["h2"] ** 2)
        grads["w2"] += c["h1"].T @ ga2
        grads["b2"] += ga2.sum(axis=0)
        gh1 = _matmul_rowsafe(ga2, params.w2.T)
        ga1 = gh1 * (1.0 - c["h1"] ** 2)
        grads["w1"] += c["inp"].T @ ga1
        grads["b1"] += ga1.sum(axis=0)
        g_inp = _matmul_rowsafe(ga1, params.w1.T)

        n = params.norm
        _canonical_features_backward(c["feat_ctx"], g_inp[:, 3:9], gR)
        gv += g_inp[:, 9:12] / n.v_scale
        gw += g_inp[:, 12:15] / n.w_scale
        gdelta += g_inp[:, 15] / n.delta_scale
        g_latent += g_inp[:, 16:48]

        # the step's rotation came from Gram-Schmidt of the row's 6-vector
        g_r6_in = _gs6_backward(c["gs_in_ctx"], gR)
        g_rows = np.empty((B, STATE_DIM))
        g_rows[:, 0:3] = gp_next
        g_rows[:, 3:9] = g_r6_in
        g_rows[:, 9:12] = gv
        g_rows[:, 12:15] = gw
        g_rows[:, 15] = gdelta
    return g_latent


# ---------------------------------------------------------------------------
# losses


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    l_data: float
    l_phys: float
    lambda_pi: float

    @property
    def l_total(self) -> float:
        return self.l_data + self.lambda_pi * self.l_phys


def loss_data(preds: np.ndarray, labels: np.ndarray) -> float:
    """Batch mean of squared error summed over the horizon and 16 elements."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {labels.shape}")
    return float(np.sum((preds - labels) ** 2) / preds.shape[0])


def loss_data_grad(preds: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {labels.shape}")
    diff = preds - labels
    return float(np.sum(diff**2) / preds.shape[0]), 2.0 * diff / preds.shape[0]


def project_to_kbm(preds: np.ndarray) -> np.ndarray:
    """Differentiable projection of (B, T, 16) predictions to (B, T, 5).

    The yaw of the Gram-Schmidt-recovered matrix depends only on the
    direction of the first column, so it reduces to atan2 on two of the
    rotation elements.
    """
    out = np.empty(preds.shape[:-1] + (5,))
    out[..., 0] = preds[..., 0]
    out[..., 1] = preds[..., 1]
    out[..., 2] = np.arctan2(preds[..., 4], preds[..., 3])
    out[..., 3] = preds[..., 9]
    out[..., 4] = preds[..., 15]
    return out


def _phys_mask(preds: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-sequence validity: drop sequences with a degenerate heading."""
    planar = preds[..., 3] ** 2 + preds[..., 4] ** 2
    good = np.all(planar > 1e-16, axis=-1) & np.all(np.isfinite(preds), axis=(-2, -1))
    return good, int(np.sum(~good))


def loss_physics(preds: np.ndarray, kbm_labels: np.ndarray) -> tuple[float, int]:
    """Batch mean of squared KBM-space error (yaw wrapped to (-pi, pi]).

    Returns the loss and the count of masked (degenerate) sequences.
    """
    if preds.shape[:-1] != kbm_labels.shape[:-1] or kbm_labels.shape[-1] != 5:
        raise ValueError(f"shape mismatch {preds.shape} vs {kbm_labels.shape}")
    good, n_masked = _phys_mask(preds)
    if n_masked:
        preds = preds[good]
        kbm_labels = kbm_labels[good]
    if preds.shape[0] == 0:
        return 0.0, n_masked
    diff = project_to_kbm(preds) - kbm_labels
    diff[..., 2] = wrap_angle(diff[..., 2])
    return float(np.sum(diff**2) / preds.shape[0]), n_masked


def loss_physics_grad(preds: np.ndarray, kbm_labels: np.ndarray
                      ) -> tuple[float, np.ndarray, int]:
    if preds.shape[:-1] != kbm_labels.shape[:-1] or kbm_labels.shape[-1] != 5:
        raise ValueError(f"shape mismatch {preds.shape} vs {kbm_labels.shape}")
    good, n_masked = _phys_mask(preds)
    g = np.zeros_like(preds)
    sel = preds[good]
    labels = kbm_labels[good]
    Bk = sel.shape[0]
    if Bk == 0:
        return 0.0, g, n_masked
    diff = project_to_kbm(sel) - labels
    diff[..., 2] = wrap_angle(diff[..., 2])
    loss = float(np.sum(diff**2) / Bk)
    gproj = 2.0 * diff / Bk
    gsel = np.zeros_like(sel)
    gsel[..., 0] = gproj[..., 0]
    gsel[..., 1] = gproj[..., 1]
    x, y = sel[..., 3], sel[..., 4]
    denom = x * x + y * y
    gsel[..., 3] = gproj[..., 2] * (-y / denom)
    gsel[..., 4] = gproj[..., 2] * (x / denom)
    gsel[..., 9] = gproj[..., 3]
    gsel[..., 15] = gproj[..., 4]
    g[good] = gsel
    return loss, g, n_masked
