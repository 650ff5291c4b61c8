"""One sectioned run configuration: YAML file, deep-merged over defaults,
hashed so every artifact can record exactly which configuration made it.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from . import __version__
from .augment import AugmentConfig
from .kbm import KbmParams
from .model import NormConfig
from .mppi import MppiConfig
from .trainer import TrainConfig
from .worldsim import CollectPolicy, SimParams

DEFAULTS: dict = {
    "seed": 2024,
    "output_root": "runs/default",
    "threads": 0,
    "kbm": {
        "wheelbase_L": 2.0, "K_t": 4.0, "K_b": 0.25, "K_f": 0.2, "K_g": 1.0,
        "g": 9.81, "K_s": 5.0, "delta_max": 0.52, "dt": 0.1,
    },
    "worldsim": {
        "size": 512,
        "resolution": 0.5,
        "roughness": 1.0,
        "terrain_seed_train": 101,
        "terrain_seed_eval": 202,
        "terrain_seed_nav": 303,
        "nav_roughness": 0.12,
        "sim": {
            "wheelbase_L": 2.0, "K_t": 4.0, "K_b": 0.22, "drag": 0.012,
            "K_f": 0.3, "K_g": 1.0, "g": 9.81, "K_s": 5.0, "delta_max": 0.52,
            "understeer": 0.55, "slip_gain": 0.4, "slip_thresh": 1.2,
            "slip_tau": 0.3, "substeps": 5, "dt": 0.1,
        },
        "train_policy": {"n_sequences": 512, "T": 50, "speed_cap": 3.0,
                         "episode_steps": 240, "stride": 25, "margin": 24.0},
        "eval_policy": {"n_sequences": 540, "T": 50, "balanced": True,
                        "episode_steps": 240, "stride": 25, "margin": 24.0,
                        "max_speed_target": 7.0},
    },
    "augment": {
        "scale_lo": 2.5, "scale_hi": 4.0, "action_mode": "reuse-raw",
        "ou_theta": [0.6, 0.8], "ou_sigma": [0.25, 0.12], "ou_mu": [0.5, 0.0],
        "ou_dt": 0.1, "delta_max": 0.52, "divergence_speed": 30.0,
    },
    "train": {
        "mode": "piaug", "lambda_pi": 1.0, "learning_rate": 1e-3,
        "batch_size": 64, "epochs": 200, "horizon": 50, "seed": 0,
        "hidden": 128, "checkpoint_every": 25,
    },
    "mppi": {
        "n_samples": 2048, "horizon": 50, "temperature": 5.0,
        "noise_std": [0.15, 0.1], "dt": 0.1, "seed": 0, "waypoint_chain": 3,
        "control_weight": 0.05, "terminal_weight": 3.0, "speed_cap": 5.0,
        "speed_cap_weight": 6.0, "delta_max": 0.52, "smooth_window": 5,
    },
    "nav": {
        "goal_radius": 4.0, "trials": 3, "time_budget": 120.0,
        "n_samples": 1024, "trial_seeds": [11, 22, 33],
    },
    "bench": {"sample_counts": [1024, 2048, 4096], "reps": 20},
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise KeyError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise TypeError(f"config section {here} must be a mapping")
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = val
    return out


class RunConfig:
    """Resolved configuration plus its content hash."""

    def __init__(self, data: dict):
        self.data = data

    @staticmethod
    def default() -> "RunConfig":
        return RunConfig(copy.deepcopy(DEFAULTS))

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return RunConfig(_deep_merge(DEFAULTS, raw))

    def override(self, dotted_key: str, value) -> None:
        parts = dotted_key.split(".")
        node = self.data
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key: {dotted_key}")
        old = node[parts[-1]]
        if isinstance(old, bool):
            value = str(value).lower() in ("1", "true", "yes")
        elif isinstance(old, int) and not isinstance(old, bool):
            value = int(value)
        elif isinstance(old, float):
            value = float(value)
        node[parts[-1]] = value

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def meta_string(self) -> str:
        return f"piaug v{__version__} config_hash={self.hash[:16]} seed={self.data['seed']}"

    def meta_dict(self) -> dict:
        return {"tool_version": __version__, "config_hash": self.hash,
                "seed": self.data["seed"]}

    # typed views ----------------------------------------------------------

    def kbm_params(self) -> KbmParams:
        return KbmParams(**self.data["kbm"])

    def sim_params(self) -> SimParams:
        return SimParams(**self.data["worldsim"]["sim"])

    def train_config(self, mode: str | None = None) -> TrainConfig:
        raw = dict(self.data["train"])
        if mode is not None:
            raw["mode"] = mode
        return TrainConfig(**raw)

    def augment_config(self) -> AugmentConfig:
        raw = dict(self.data["augment"])
        for k in ("ou_theta", "ou_sigma", "ou_mu"):
            raw[k] = tuple(raw[k])
        return AugmentConfig(seed=self.data["seed"], **raw)

    def mppi_config(self, n_samples: int | None = None) -> MppiConfig:
        raw = dict(self.data["mppi"])
        raw["noise_std"] = tuple(raw["noise_std"])
        if n_samples is not None:
            raw["n_samples"] = n_samples
        return MppiConfig(**raw)

    def train_policy(self) -> CollectPolicy:
        return CollectPolicy(**self.data["worldsim"]["train_policy"])

    def eval_policy(self) -> CollectPolicy:
        return CollectPolicy(**self.data["worldsim"]["eval_policy"])

    def norm_config(self) -> NormConfig:
        return NormConfig()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.data, fh, sort_keys=True)
