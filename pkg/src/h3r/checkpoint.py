"""Binary tensor container used for checkpoints.

Layout: the magic ``H3RT``, a version byte (1), then records until end of
file. A record is ``u32 name length | UTF-8 name | 3-byte dtype tag (f32 or
f64) | u32 rank | rank x u64 extents | row-major payload``, all little-endian.
EMA shadows live under the ``ema/`` prefix. The run config is written next to
the checkpoint as ``<path>.cfg``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

__all__ = [
    "MAGIC",
    "VERSION",
    "EMA_PREFIX",
    "CheckpointError",
    "write_tensors",
    "read_tensors",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
]

MAGIC = b"H3RT"
VERSION = 1
EMA_PREFIX = "ema/"
_DTYPES = {b"f32": np.dtype("<f4"), b"f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): b"f32", np.dtype("float64"): b"f64"}


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            tag = _TAGS.get(arr.dtype)
            if tag is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)) + encoded + tag)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 5 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a tensor container")
    if data[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {data[4]}")
    pos = 5
    out = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated record at byte {pos} (need {n}, have {len(data) - pos})")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: record name is not UTF-8") from None
        tag = take(3)
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: {name}: unknown dtype tag {tag!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(count * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return out


def save_checkpoint(model: torch.nn.Module, path, ema=None, config=None) -> None:
    tensors = {n: p for n, p in model.state_dict().items()}
    if ema is not None:
        for n, t in ema.averaged().items():
            tensors[EMA_PREFIX + n] = t
    write_tensors(path, tensors)
    if config is not None:
        from .config import dump_config

        Path(str(path) + ".cfg").write_text(dump_config(config))


def load_checkpoint(model: torch.nn.Module, path, use_ema: bool = False) -> dict:
    """Load parameters into ``model`` (the EMA shadow instead when ``use_ema`` and present).

    Returns the raw tensor dict. Raises :class:`CheckpointError` naming missing and unexpected tensors.
    """
    tensors = read_tensors(path)
    plain = {n: t for n, t in tensors.items() if not n.startswith(EMA_PREFIX)}
    ema = {n[len(EMA_PREFIX):]: t for n, t in tensors.items() if n.startswith(EMA_PREFIX)}
    state = model.state_dict()
    missing = sorted(set(state) - set(plain))
    unexpected = sorted(set(plain) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"architecture mismatch: missing {missing}, unexpected {unexpected}")
    source = dict(plain)
    if use_ema and ema:
        source.update(ema)
    new_state = {}
    for name, ref in state.items():
        arr = source[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{name}: shape {tuple(arr.shape)} does not match model {tuple(ref.shape)}")
        new_state[name] = torch.as_tensor(arr, dtype=ref.dtype)
    model.load_state_dict(new_state)
    return tensors


def load_model(path, use_ema: bool = True, config: Optional[object] = None):
    """Rebuild an :class:`~h3r.network.H3R` from a checkpoint and its ``.cfg`` sidecar."""
    from .config import load_config
    from .network import H3R

    if config is None:
        side = Path(str(path) + ".cfg")
        if not side.exists():
            raise CheckpointError(f"{path}: config sidecar {side.name} not found")
        config = load_config(side)
    model = H3R(config.model)
    load_checkpoint(model, path, use_ema=use_ema)
    return model, config
