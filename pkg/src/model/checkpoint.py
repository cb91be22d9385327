"""SENET1 checkpoint container.

Layout: the 6-byte magic ``SENET1``, a little-endian u32 giving the JSON
metadata length, the metadata itself (sorted keys), then every array as
float64 little-endian values in the order listed by the metadata index.
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from src.autodiff.tensor import Tensor
from src.errors import CheckpointFormatError, ModelClassMapMismatch
from src.model.se_resnet import ModelConfig, ModelParams, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"SENET1"
_LENGTH = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: ModelParams
    class_map_identity: str
    class_names: List[str]


def encode_checkpoint(params: ModelParams, class_map_identity: str, class_names: List[str]) -> bytes:
    index = []
    blobs = []
    for kind, arrays in (("param", params.tensors), ("buffer", params.buffers)):
        for name, value in arrays.items():
            data = value.data if isinstance(value, Tensor) else value
            index.append({"name": name, "kind": kind, "shape": list(data.shape)})
            blobs.append(np.ascontiguousarray(data, dtype="<f8").tobytes())

    metadata = {
        "format": MAGIC.decode("ascii"),
        "config": params.config.model_dump(),
        "class_map_identity": class_map_identity,
        "class_names": list(class_names),
        "arrays": index,
    }
    header = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header)) + header + b"".join(blobs)


def save_checkpoint(path, params: ModelParams, class_map_identity: str, class_names: List[str]) -> Path:
    """
    Write parameters, BN running statistics and the class-map identity.

    Args:
        path: Destination file, parent directories are created
        params (ModelParams): Trained parameters
        class_map_identity (str): ClassMap.identity() of the labels trained on
        class_names (List[str]): Class abbreviations in output order

    Returns:
        Path: Written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, class_map_identity, class_names))
    logger.info(f"Wrote checkpoint {path}")
    return path


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if not payload.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: missing SENET1 magic")
    offset = len(MAGIC)
    if len(payload) < offset + _LENGTH.size:
        raise CheckpointFormatError(f"{source}: truncated metadata length")
    (header_length,) = _LENGTH.unpack_from(payload, offset)
    offset += _LENGTH.size

    try:
        metadata = json.loads(payload[offset:offset + header_length].decode("utf-8"))
        config = ModelConfig(**metadata["config"])
        entries = metadata["arrays"]
        identity = metadata["class_map_identity"]
        class_names = list(metadata["class_names"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointFormatError(f"{source}: unreadable metadata ({e})")
    offset += header_length

    params = ModelParams(config=config, tensors=OrderedDict(), buffers=OrderedDict())
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise CheckpointFormatError(f"{source}: array {entry['name']} is truncated")
        data = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
        if entry["kind"] == "param":
            params.tensors[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
        else:
            params.buffers[entry["name"]] = data

    if offset != len(payload):
        raise CheckpointFormatError(f"{source}: {len(payload) - offset} trailing bytes")

    expected = param_shapes(config)
    actual = OrderedDict((name, t.shape) for name, t in params.tensors.items())
    if actual != expected:
        raise CheckpointFormatError(f"{source}: parameter set does not match its stored config")

    return Checkpoint(params=params, class_map_identity=identity, class_names=class_names)


def load_checkpoint(path, expected_identity: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint, optionally checking it was trained on a given class map.

    Args:
        path: Checkpoint file
        expected_identity (str, optional): ClassMap.identity() the caller will label with

    Returns:
        Checkpoint: Parameters and class-map information

    Raises:
        CheckpointFormatError: Not a readable SENET1 file
        ModelClassMapMismatch: Stored identity differs from ``expected_identity``
    """
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    if expected_identity is not None and checkpoint.class_map_identity != expected_identity:
        raise ModelClassMapMismatch(f"{path} was trained with a different class map")
    return checkpoint
