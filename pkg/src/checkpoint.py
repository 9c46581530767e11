"""Binary checkpoint container plus a plain-text manifest."""

import json
import os
import struct
from typing import Any, Dict, List, Tuple

import numpy as np

from .model import ModelConfig, ModelState, XBusNet
from .prompts import SizeBins
from .tensor import ShapeError

MAGIC = b"XBNCKPT1"
MANIFEST_HEADER = "# xbusnet-checkpoint v1"
MANIFEST_SUFFIX = ".manifest.txt"


class CheckpointError(Exception):
    """Raised when a checkpoint or its manifest cannot be read."""
    pass


def manifest_path(path: str) -> str:
    return path + MANIFEST_SUFFIX


def write_tensors(path: str, entries: List[Tuple[str, np.ndarray]]) -> None:
    """Write (name, array) pairs as float64 little-endian records."""
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", array.ndim))
            handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_tensors(path: str) -> Dict[str, np.ndarray]:
    """
    Read a container written by write_tensors.

    Raises:
        CheckpointError: On a bad magic string or a truncated file.
    """
    with open(path, "rb") as handle:
        payload = handle.read()
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + length].decode("utf-8")
            offset += length
            (ndim,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if offset + 8 * size > len(payload):
                raise CheckpointError(f"{path} is truncated in entry '{name}'")
            tensors[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
            offset += 8 * size
    except struct.error as e:
        raise CheckpointError(f"{path} is truncated: {e}")
    return tensors


def save_checkpoint(state: ModelState, path: str) -> str:
    """
    Save parameter values and a manifest next to them.

    Args:
        state: Trained model state.
        path: Destination of the binary container.

    Returns:
        str: Path of the manifest file.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    named = list(state.model.named_parameters())
    write_tensors(path, [(name, p.data) for name, p in named])

    meta = {
        "profile": state.config.profile,
        "seed": state.seed,
        "fold": state.fold,
        "size_bins": [state.size_bins.t1, state.size_bins.t2] if state.size_bins else None,
        "model_config": state.config.to_dict(),
        "run_config": state.run_config,
    }
    lines = [MANIFEST_HEADER, "# meta " + json.dumps(meta, sort_keys=True)]
    for name, p in named:
        shape = "x".join(str(d) for d in p.shape)
        lines.append(f"{name}\t{shape}\t{str(p.frozen).lower()}")
    with open(manifest_path(path), "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
    return manifest_path(path)


def read_manifest(path: str) -> Tuple[Dict[str, Any], List[Tuple[str, Tuple[int, ...], bool]]]:
    """Return (meta, [(name, shape, frozen), ...]) from a manifest file."""
    with open(path, encoding="utf-8") as handle:
        lines = [line.rstrip("\n") for line in handle if line.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CheckpointError(f"{path} is not a checkpoint manifest")
    if len(lines) < 2 or not lines[1].startswith("# meta "):
        raise CheckpointError(f"{path} has no meta line")
    meta = json.loads(lines[1][len("# meta "):])
    entries = []
    for line in lines[2:]:
        name, shape, frozen = line.split("\t")
        dims = tuple(int(d) for d in shape.split("x")) if shape else ()
        entries.append((name, dims, frozen == "true"))
    return meta, entries


def load_checkpoint(path: str) -> ModelState:
    """
    Rebuild the network from the manifest and restore every parameter bit-exactly.

    Raises:
        CheckpointError: If files are missing or malformed.
        ShapeError: On unknown names, missing names or shape mismatches.
    """
    if not os.path.isfile(path) or not os.path.isfile(manifest_path(path)):
        raise CheckpointError(f"checkpoint {path} or its manifest is missing")
    meta, _ = read_manifest(manifest_path(path))
    model = XBusNet(ModelConfig.from_dict(meta["model_config"]))
    values = read_tensors(path)
    parameters = dict(model.named_parameters())
    unknown = sorted(set(values) - set(parameters))
    missing = sorted(set(parameters) - set(values))
    if unknown or missing:
        raise ShapeError(f"checkpoint names do not match the model: unknown={unknown[:5]}, missing={missing[:5]}")
    for name, array in values.items():
        if array.shape != parameters[name].shape:
            raise ShapeError(f"'{name}': checkpoint shape {array.shape} != model shape {parameters[name].shape}")
        parameters[name].data = array
    bins = meta.get("size_bins")
    return ModelState(
        model=model,
        seed=meta["seed"],
        size_bins=SizeBins(*bins) if bins else None,
        fold=meta.get("fold"),
        run_config=meta.get("run_config") or {},
    )
