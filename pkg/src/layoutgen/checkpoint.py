"""Versioned model checkpoints.

A checkpoint is a single ``torch.save`` file holding::

    {"format_version": 1,
     "kind": "denoiser" | "corrector",
     "config": {<dataclass fields of the model config>},
     "state": <state_dict>}

Tensors round-trip bit-exactly.  Loading rejects unknown kinds/versions and
reconstructs the model from the embedded config, so a checkpoint is
self-describing; vocabulary compatibility with a run config is checked by
comparing the embedded fields.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(path: str | Path, kind: str, model: torch.nn.Module) -> None:
    if kind not in ("denoiser", "corrector"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": asdict(model.cfg),
        "state": model.state_dict(),
    }
    torch.save(payload, str(path))


def _load_payload(path: str | Path, expect_kind: str) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    if payload.get("kind") != expect_kind:
        raise CheckpointError(
            f"checkpoint kind {payload.get('kind')!r} where {expect_kind!r} expected"
        )
    return payload


def load_denoiser(path: str | Path):
    from .denoiser import Denoiser, DenoiserConfig

    payload = _load_payload(path, "denoiser")
    model = Denoiser(DenoiserConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def load_corrector(path: str | Path):
    from .corrector import Corrector, CorrectorConfig

    payload = _load_payload(path, "corrector")
    model = Corrector(CorrectorConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
