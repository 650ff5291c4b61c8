"""File formats: a small binary array container used for datasets and
checkpoints (byte-for-byte reproducible, unlike zip-based formats), the
observation grid export, and loaders with tag/version validation.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .augment import DataSequence
from .model import ModelParams, NormConfig
from .state import FullState, Observation

MAGIC = b"PIAUGB01"
CHECKPOINT_FORMAT = 1
DATASET_FORMAT = 1


class FileFormatError(RuntimeError):
    """Unknown magic, version, or a corrupt container."""


def write_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: not a piaug container (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = fh.read(n * np.dtype(e["dtype"]).itemsize)
            arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, meta: dict,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Versioned weight blob plus a sidecar text file with the run metadata."""
    meta = dict(meta)
    meta.update(kind="checkpoint", format=CHECKPOINT_FORMAT, tool_version=__version__,
                norm=dataclasses.asdict(params.norm))
    arrays = {n: getattr(params, n) for n in ModelParams.WEIGHT_FIELDS}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_blob(path, meta, arrays)
    side = dict(meta)
    side.pop("norm", None)
    Path(str(path) + ".meta.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    meta, arrays = read_blob(path)
    if meta.get("kind") != "checkpoint":
        raise FileFormatError(f"{path}: not a checkpoint")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FileFormatError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    norm_raw = meta.get("norm", {})
    if "out_scale" in norm_raw:
        norm_raw["out_scale"] = tuple(norm_raw["out_scale"])
    norm = NormConfig(**norm_raw)
    kw = {n: arrays.pop(n) for n in ModelParams.WEIGHT_FIELDS}
    return ModelParams(norm=norm, **kw), meta, arrays


# ---------------------------------------------------------------------------
# datasets


def save_dataset(path, sequences: list[DataSequence], meta: dict) -> None:
    meta = dict(meta)
    meta.update(kind="dataset", format=DATASET_FORMAT, tool_version=__version__,
                n_sequences=len(sequences),
                horizon=sequences[0].horizon if sequences else 0,
                obs_resolution=sequences[0].obs.resolution if sequences else 0.5)
    arrays = {
        "x0": np.array([s.x0.as_array() for s in sequences]),
        "patches": np.array([s.obs.height_patch for s in sequences]),
        "obs_oob": np.array([s.obs.out_of_bounds for s in sequences], dtype=np.uint8),
        "actions": np.array([s.actions for s in sequences]),
        "labels": np.array([s.labels for s in sequences]),
    }
    write_blob(path, meta, arrays)


def load_dataset(path, expect_tag: str | None = None
                 ) -> tuple[list[DataSequence], dict]:
    meta, arrays = read_blob(path)
    if meta.get("kind") != "dataset":
        raise FileFormatError(f"{path}: not a dataset file")
    if meta.get("format") != DATASET_FORMAT:
        raise FileFormatError(f"{path}: unsupported dataset format {meta.get('format')}")
    if expect_tag is not None and meta.get("tag") != expect_tag:
        raise FileFormatError(
            f"{path}: dataset tagged {meta.get('tag')!r}, expected {expect_tag!r}")
    res = float(meta.get("obs_resolution", 0.5))
    seqs = []
    for i in range(int(meta["n_sequences"])):
        obs = Observation(height_patch=arrays["patches"][i], resolution=res,
                          out_of_bounds=bool(arrays["obs_oob"][i]))
        seqs.append(DataSequence(
            x0=FullState.from_array(arrays["x0"][i]),
            obs=obs,
            actions=arrays["actions"][i],
            labels=arrays["labels"][i],
        ))
    return seqs, meta


# ---------------------------------------------------------------------------
# observation grid export


def save_observation(path, obs: Observation) -> None:
    """4-plane binary grid with a small text header."""
    h, w, c = obs.height_patch.shape
    header = (f"PIAUG-OBS 1\nH {h}\nW {w}\nC {c}\n"
              f"resolution {obs.resolution:.17g}\n"
              f"out_of_bounds {int(obs.out_of_bounds)}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(
            np.moveaxis(obs.height_patch, -1, 0)).astype(np.float64).tobytes())


def load_observation(path) -> Observation:
    with open(path, "rb") as fh:
        lines = []
        while len(lines) < 6:
            lines.append(fh.readline().decode().strip())
        if lines[0] != "PIAUG-OBS 1":
            raise FileFormatError(f"{path}: not an observation export")
        fields = dict(line.split(" ", 1) for line in lines[1:])
        h, w, c = int(fields["H"]), int(fields["W"]), int(fields["C"])
        planes = np.frombuffer(fh.read(h * w * c * 8), dtype=np.float64)
    patch = np.moveaxis(planes.reshape(c, h, w), 0, -1).copy()
    return Observation(height_patch=patch, resolution=float(fields["resolution"]),
                       out_of_bounds=bool(int(fields["out_of_bounds"])))
