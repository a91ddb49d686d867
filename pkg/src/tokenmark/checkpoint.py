"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive.  Every parameter/buffer is stored as
``<namespace>/<dotted.name>`` where namespace is one of ``vq``, ``localizer``,
``restorer`` or ``manipulator``.  The entry ``__config__`` holds a UTF-8 JSON
document (as a uint8 array) with keys::

    format        "tokenmark-checkpoint"
    version       1
    stft          {n_fft, hop, win_length, window}
    sample_rate   int
    vq            VQConfig fields (K = codebook_size, d = code_dim, ...)
    manipulator   ManipulatorConfig fields
    stages        {"stage1": bool, "stage2": bool}
    calibration   {alpha, beta, source, n_frames} or null
    metadata      free-form dict (training summary, seeds, ...)
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .audio import StftConfig
from .manipulator import ManipulatorConfig
from .model import WatermarkModel
from .stats import DetectorCalibration
from .vq import VQConfig

FORMAT = "tokenmark-checkpoint"
VERSION = 1
NAMESPACES = ("vq", "localizer", "restorer", "manipulator")


class CheckpointError(RuntimeError):
    pass


def config_block(model: WatermarkModel) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "stft": model.stft_cfg.to_dict(),
        "sample_rate": model.sample_rate,
        "vq": dataclasses.asdict(model.vq_cfg),
        "manipulator": dataclasses.asdict(model.manip_cfg),
        "stages": {"stage1": model.stage1_trained, "stage2": model.stage2_trained},
        "calibration": model.calibration.to_dict() if model.calibration else None,
        "metadata": model.metadata,
    }


def state_arrays(model: WatermarkModel, namespaces=NAMESPACES) -> dict:
    arrays = {}
    for ns in namespaces:
        for name, t in getattr(model, ns).state_dict().items():
            arrays[f"{ns}/{name}"] = t.detach().cpu().numpy()
    return arrays


def save(model: WatermarkModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = state_arrays(model)
    meta = json.dumps(config_block(model), sort_keys=True).encode()
    arrays["__config__"] = np.frombuffer(meta, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_config(path) -> dict:
    with np.load(path) as data:
        if "__config__" not in data:
            raise CheckpointError(f"{path} is not a {FORMAT} file")
        cfg = json.loads(data["__config__"].tobytes().decode())
    if cfg.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if cfg.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {cfg.get('version')}")
    return cfg


def load(path) -> WatermarkModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cfg = read_config(path)
    model = WatermarkModel(VQConfig(**cfg["vq"]), ManipulatorConfig(**cfg["manipulator"]),
                           StftConfig(**cfg["stft"]), cfg["sample_rate"])
    with np.load(path) as data:
        for ns in NAMESPACES:
            module = getattr(model, ns)
            prefix = ns + "/"
            state = {k[len(prefix):]: torch.from_numpy(data[k].copy())
                     for k in data.files if k.startswith(prefix)}
            module.load_state_dict(state)
    model.stage1_trained = cfg["stages"]["stage1"]
    model.stage2_trained = cfg["stages"]["stage2"]
    if cfg["calibration"]:
        model.calibration = DetectorCalibration(**cfg["calibration"])
    model.metadata = cfg["metadata"]
    model.eval()
    return model


def check_stft(path, stft_cfg: StftConfig) -> None:
    """Raise CheckpointError if ``stft_cfg`` differs from the one the model was trained with."""
    stored = read_config(path)["stft"]
    if stored != stft_cfg.to_dict():
        raise CheckpointError(f"STFT config {stft_cfg.to_dict()} does not match checkpoint {stored}")
