"""Checkpoint archive: named parameter arrays plus a config fingerprint.

A checkpoint is a single .npz mapping hierarchical state names (parameters
and buffers) to shape-tagged numeric arrays, with a JSON metadata record
carrying the network config, its fingerprint, the training epoch, and
optional optimizer momentum buffers.  Loading verifies the fingerprint.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import GridError
from .network import AMFNet, NetworkConfig


class CheckpointError(GridError):
    """Archive malformed or inconsistent with the requesting network."""


def save_checkpoint(
    path: str | Path,
    net: AMFNet,
    epoch: int = 0,
    momentum_buffers: Optional[dict[str, torch.Tensor]] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    arrays = {}
    for name, tensor in net.state_dict().items():
        arrays[f"state/{name}"] = tensor.detach().cpu().numpy()
    if momentum_buffers:
        for name, tensor in momentum_buffers.items():
            arrays[f"momentum/{name}"] = tensor.detach().cpu().numpy()
    meta = {
        "config": net.config.to_dict(),
        "fingerprint": net.config.fingerprint(),
        "variant": net.config.variant.to_string(),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Return (meta, state arrays, momentum arrays) without building a network."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if "meta" not in archive:
            raise CheckpointError(f"{path} is not a checkpoint archive (no metadata record)")
        meta = json.loads(archive["meta"].tobytes().decode())
        state = {k[len("state/"):]: archive[k] for k in archive.files if k.startswith("state/")}
        momentum = {k[len("momentum/"):]: archive[k] for k in archive.files if k.startswith("momentum/")}
    config = NetworkConfig.from_dict(meta["config"])
    if config.fingerprint() != meta["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch; archive is corrupt or stale")
    return meta, state, momentum


def load_into(net: AMFNet, path: str | Path) -> dict:
    """Load archived state into an existing network; configs must match."""
    meta, state, _ = read_checkpoint(path)
    if net.config.fingerprint() != meta["fingerprint"]:
        raise CheckpointError(
            "checkpoint fingerprint does not match the network configuration "
            f"(archive variant {meta['variant']}, network {net.config.variant.to_string()})"
        )
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    return meta


def restore_network(path: str | Path) -> tuple[AMFNet, dict, dict[str, np.ndarray]]:
    """Rebuild the archived network: (net, meta, momentum buffers)."""
    meta, state, momentum = read_checkpoint(path)
    net = AMFNet(NetworkConfig.from_dict(meta["config"]))
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    return net, meta, momentum
