"""
checkpoints.py
--------------
Single-file model archives and the checkpoint directory layout.

An archive is a torch.save'd dict:

    format      "pad-ckpt"
    version     CHECKPOINT_VERSION
    kind        fullface | patch | fusion
    config      JSON text of the model's constructor arguments
    state_dict  named parameters and buffers (the style bank and the input
                normalisation live here for the full-face model)

Directory layout
----------------
phase1.ckpt, patch_<region>.ckpt ×7, fusion.ckpt, attention.csv,
norm_stats.txt, config_snapshot, plus the per-phase training logs.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from networks import FullFaceModel, FusionModel, PatchModel
from pad_errors import CheckpointError
from patch_geometry import REGION_NAMES

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pad-ckpt"
CHECKPOINT_VERSION = 1
MODEL_KINDS = {"fullface": FullFaceModel, "patch": PatchModel, "fusion": FusionModel}


def _kind_of(model: nn.Module) -> str:
    for kind, cls in MODEL_KINDS.items():
        if isinstance(model, cls):
            return kind
    raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")


def save_model(model: nn.Module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _kind_of(model),
        "config": json.dumps(model.config, sort_keys=True),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    try:
        torch.save(archive, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_model(path, expected_kind: str = None, device: str = "cpu") -> nn.Module:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path} (run the training stage that produces it)")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {archive.get('version')}")
    kind = archive["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path} holds a {kind} model, expected {expected_kind}")

    model = MODEL_KINDS[kind](**json.loads(archive["config"]))
    try:
        model.load_state_dict(archive["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not match its config: {exc}") from exc
    model.to(device).eval()
    return model


def state_checksum(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ------------------------------------------------------------------ norm stats
def write_norm_stats(mean, std, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    path.write_text("mean " + " ".join(f"{v:.8f}" for v in mean) + "\n"
                    + "std " + " ".join(f"{v:.8f}" for v in std) + "\n", encoding="utf-8")
    return path


def read_norm_stats(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"normalisation stats not found: {path}")
    rows = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts:
            rows[parts[0]] = np.array([float(v) for v in parts[1:]])
    if set(rows) != {"mean", "std"} or any(len(v) != 3 for v in rows.values()):
        raise CheckpointError(f"{path}: expected 'mean r g b' and 'std r g b' lines")
    return rows["mean"], rows["std"]


# ------------------------------------------------------------------ layout
@dataclass(frozen=True)
class CheckpointDir:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def phase1(self) -> Path:
        return self.root / "phase1.ckpt"

    def patch(self, region: str) -> Path:
        if region not in REGION_NAMES:
            raise CheckpointError(f"unknown region {region!r}")
        return self.root / f"patch_{region}.ckpt"

    @property
    def fusion(self) -> Path:
        return self.root / "fusion.ckpt"

    @property
    def attention(self) -> Path:
        return self.root / "attention.csv"

    @property
    def norm_stats(self) -> Path:
        return self.root / "norm_stats.txt"

    @property
    def config_snapshot(self) -> Path:
        return self.root / "config_snapshot"

    def log(self, phase: str) -> Path:
        return self.root / f"{phase}_log.csv"

    def require(self, *paths: Union[str, Path]) -> None:
        missing = [Path(p).name for p in paths if not Path(p).exists()]
        if missing:
            raise CheckpointError(f"{self.root}: missing {', '.join(missing)}")
