"""
Binary checkpoint container.

Layout (little-endian):
    8 bytes   magic b"FKCKPT01"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: version, fingerprint, runner state, optimizer
              param groups and non-tensor state, tensor manifest
              (name, shape, dtype, offset, nbytes)
    data      raw tensor bytes; offsets are relative to the data start
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from fashion_errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"FKCKPT01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model_params: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Any]
    state: Dict[str, Any]
    config_fingerprint: str
    format_version: int = FORMAT_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)


def _tensor_bytes(tensor: torch.Tensor) -> Tuple[np.ndarray, bytes]:
    array = tensor.detach().cpu().contiguous().numpy()
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return array, little.tobytes(order="C")


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    tensors: List[Tuple[str, torch.Tensor]] = [(f"model.{k}", v) for k, v in ckpt.model_params.items()]
    optimizer_scalars: Dict[str, Dict[str, Any]] = {}
    for param_id, entries in ckpt.optimizer_state.get("state", {}).items():
        for key, value in entries.items():
            if isinstance(value, torch.Tensor):
                tensors.append((f"optim.{param_id}.{key}", value))
            else:
                optimizer_scalars.setdefault(str(param_id), {})[key] = value
    manifest, blobs, offset = [], [], 0
    for name, tensor in tensors:
        array, blob = _tensor_bytes(tensor)
        manifest.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.name,
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": ckpt.format_version,
        "fingerprint": ckpt.config_fingerprint,
        "state": ckpt.state,
        "optimizer": {"param_groups": ckpt.optimizer_state.get("param_groups", []),
                      "scalars": optimizer_scalars},
        "extra": ckpt.extra,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, ckpt.format_version, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    data_start = _PREFIX.size + header_len
    if data_start > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:data_start].decode("utf-8"))
        if header["version"] != version:
            raise ValueError("header version disagrees with the file prefix")
        manifest = header["tensors"]
        fingerprint = header["fingerprint"]
        state = header["state"]
        optimizer = header["optimizer"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    data = memoryview(raw)[data_start:]
    model_params: Dict[str, torch.Tensor] = {}
    optimizer_tensors: Dict[str, Dict[str, Any]] = {}
    for entry in manifest:
        try:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            start, nbytes, shape = int(entry["offset"]), int(entry["nbytes"]), tuple(entry["shape"])
            if start < 0 or start + nbytes > len(data):
                raise ValueError("tensor bytes out of range")
            array = np.frombuffer(data[start:start + nbytes], dtype=dtype).reshape(shape)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: corrupt tensor entry {entry.get('name', '?')}: {e}") from None
        tensor = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))
        kind, _, rest = entry["name"].partition(".")
        if kind == "model":
            model_params[rest] = tensor
        elif kind == "optim":
            param_id, _, key = rest.partition(".")
            optimizer_tensors.setdefault(param_id, {})[key] = tensor
        else:
            raise CheckpointError(f"{path}: unknown tensor group in '{entry['name']}'")
    optimizer_state: Dict[Any, Dict[str, Any]] = {}
    for param_id, entries in optimizer.get("scalars", {}).items():
        optimizer_state.setdefault(int(param_id), {}).update(entries)
    for param_id, entries in optimizer_tensors.items():
        optimizer_state.setdefault(int(param_id), {}).update(entries)
    return Checkpoint(model_params, {"state": optimizer_state, "param_groups": optimizer["param_groups"]},
                      state, fingerprint, version, header.get("extra", {}))


def check_fingerprint(ckpt: Checkpoint, fingerprint: str, source: Union[str, Path],
                      allow_mismatch: bool = False) -> None:
    if ckpt.config_fingerprint == fingerprint:
        return
    message = (f"{source}: checkpoint was trained with model config {ckpt.config_fingerprint[:12]}, "
               f"active config is {fingerprint[:12]}")
    if not allow_mismatch:
        raise CheckpointError(message)
    logger.warning("!!! FINGERPRINT MISMATCH OVERRIDDEN !!! %s", message)


def load_model_weights(model: torch.nn.Module, path: Union[str, Path], fingerprint: str,
                       allow_fingerprint_mismatch: bool = False) -> Checkpoint:
    ckpt = read_checkpoint(path)
    check_fingerprint(ckpt, fingerprint, path, allow_fingerprint_mismatch)
    try:
        model.load_state_dict(ckpt.model_params, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not fit the model: {e}") from None
    return ckpt


def save_checkpoint(runner, path: Union[str, Path]) -> Path:
    """Snapshot model, optimizer and runner counters"""
    ckpt = Checkpoint(model_params=runner.model.state_dict(), optimizer_state=runner.optimizer.state_dict(),
                      state=asdict(runner.state), config_fingerprint=runner.fingerprint)
    write_checkpoint(path, ckpt)
    logger.info("saved checkpoint %s", path)
    return Path(path)


def load_and_resume(runner, path: Union[str, Path], allow_fingerprint_mismatch: bool = False) -> None:
    """Restore parameters, optimizer state and counters; training continues at the next iteration"""
    ckpt = load_model_weights(runner.model, path, runner.fingerprint, allow_fingerprint_mismatch)
    try:
        runner.optimizer.load_state_dict(ckpt.optimizer_state)
    except (ValueError, KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: optimizer state does not fit: {e}") from None
    max_epochs = runner.state.max_epochs
    try:
        runner.state = type(runner.state)(**ckpt.state)
    except TypeError as e:
        raise CheckpointError(f"{path}: corrupt runner state: {e}") from None
    # the active schedule decides how long the resumed run goes on
    runner.state.max_epochs = max_epochs
    runner.resumed_from = Path(path)
    runner.set_lr(runner.state.lr)
    logger.info("resumed from %s at epoch %d, iter %d", path, runner.state.epoch, runner.state.iter)
