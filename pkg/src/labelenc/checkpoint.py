"""Named-array checkpoint archive.

A checkpoint is an uncompressed zip holding:
  index.json      [{"name", "dtype" (numpy str, little-endian), "shape", "file"}, ...]
  arrays/NNNNN.bin  raw little-endian bytes per array, in index order
  metadata.json   free-form record (config hash, iteration, seeds, versions, ...)
"""

from __future__ import annotations

import json
import logging
import platform
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def module_versions() -> dict[str, str]:
    from . import __version__

    return {"labelenc": __version__, "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version()}


def state_arrays(stores: Mapping[str, nn.Module]) -> dict[str, torch.Tensor]:
    """Flatten ``{"encoder": module, ...}`` into ``{"encoder/stem.weight": tensor, ...}``."""
    out = {}
    for prefix, module in stores.items():
        for name, t in module.state_dict().items():
            out[f"{prefix}/{name}"] = t.detach()
    return out


def save_checkpoint(
    params: Mapping[str, nn.Module] | Mapping[str, torch.Tensor], metadata: Mapping[str, Any], path: str | Path
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = state_arrays(params) if all(isinstance(v, nn.Module) for v in params.values()) else dict(params)
    index = []
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, t) in enumerate(arrays.items()):
            a = t.cpu().numpy()
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            fname = f"arrays/{i:05d}.bin"
            zf.writestr(fname, np.ascontiguousarray(a).tobytes())
            index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "file": fname})
        zf.writestr("index.json", json.dumps(index, indent=1))
        meta = {"format_version": FORMAT_VERSION, "versions": module_versions(), **metadata}
        zf.writestr("metadata.json", json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            index = json.loads(zf.read("index.json"))
            metadata = json.loads(zf.read("metadata.json"))
            arrays = {}
            for rec in index:
                dtype = np.dtype(rec["dtype"])
                raw = zf.read(rec["file"])
                shape = tuple(rec["shape"])
                if len(raw) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
                    raise CheckpointError(f"{path}: array {rec['name']} has {len(raw)} bytes, expected shape {shape}")
                a = np.frombuffer(raw, dtype=dtype).reshape(shape)
                arrays[rec["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("="), copy=True))
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: corrupt or incompatible checkpoint ({e})") from e
    if metadata.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {metadata.get('format_version')}")
    if expected_config_hash is not None and metadata.get("config_hash") != expected_config_hash:
        log.warning(
            "%s: config hash %s differs from current config %s", path, metadata.get("config_hash"), expected_config_hash
        )
    return arrays, metadata


def load_into(stores: Mapping[str, nn.Module], arrays: Mapping[str, torch.Tensor]) -> None:
    """Copy arrays into modules; raise naming the first missing or mismatched array."""
    for prefix, module in stores.items():
        state = module.state_dict()
        new_state = {}
        for name, t in state.items():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"array {key} missing from checkpoint")
            src = arrays[key]
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"array {key}: checkpoint shape {tuple(src.shape)} != model shape {tuple(t.shape)}")
            if src.dtype != t.dtype:
                raise CheckpointError(f"array {key}: checkpoint dtype {src.dtype} != model dtype {t.dtype}")
            new_state[name] = src
        module.load_state_dict(new_state)
