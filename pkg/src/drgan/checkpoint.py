"""Checkpoint archive: a directory with ``manifest.json`` plus flat binary tensor blobs.

Blob layout (all integers little-endian)::

    magic   4 bytes  b"DRGB"
    version u32      1
    count   u32      number of entries
    entry * count:
        name_len u16, name (utf-8)
        dtype_len u8, dtype (numpy dtype string, e.g. "<f4")
        ndim u8, shape (ndim * u64)
        nbytes u64, data (row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from drgan.errors import IngestionError

MAGIC = b"DRGB"
VERSION = 1


def write_blob(tensors: dict[str, torch.Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, tensor in tensors.items():
            src = tensor.detach().cpu().numpy()
            # ascontiguousarray promotes 0-d arrays to 1-d; keep the original shape
            arr = np.ascontiguousarray(src).reshape(src.shape)
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)) + name_b)
            fh.write(struct.pack("<B", len(dtype_b)) + dtype_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            data = arr.tobytes(order="C")
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def read_blob(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise IngestionError(f"{path}: not a parameter blob")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported blob version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (n,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dtype = np.dtype(buf[pos : pos + n].decode("ascii"))
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        out[name] = torch.from_numpy(arr.copy())
    return out


def _flatten_optimizer(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    flat = {}
    for pid, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            flat[f"{pid}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    return flat


def _restore_optimizer(opt: torch.optim.Optimizer, flat: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, value in flat.items():
        pid, key = name.split(".", 1)
        state.setdefault(int(pid), {})[key] = value
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(path, modules: dict, optimizers: dict, manifest: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, module in modules.items():
        write_blob(module.state_dict(), path / f"{name}.bin")
    for name, opt in optimizers.items():
        write_blob(_flatten_optimizer(opt), path / f"{name}.optim.bin")
    manifest = dict(manifest)
    manifest["modules"] = sorted(modules)
    manifest["optimizers"] = sorted(optimizers)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise IngestionError(f"no manifest.json under {path}")
    return json.loads((path / "manifest.json").read_text())


def load_module(path, name, module: torch.nn.Module) -> torch.nn.Module:
    module.load_state_dict(read_blob(Path(path) / f"{name}.bin"))
    return module


def load_optimizer(path, name, opt: torch.optim.Optimizer) -> None:
    blob = Path(path) / f"{name}.optim.bin"
    if blob.is_file():
        _restore_optimizer(opt, read_blob(blob))
