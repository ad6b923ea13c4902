"""Binary detector checkpoints.

Layout, little-endian throughout::

    b"ADVF"                      magic
    uint16 version
    uint32 tensor count
    per tensor (sorted by name):
        uint16 name length, utf-8 name
        uint8 ndim, uint32 * ndim shape
        float64 * prod(shape) payload

A JSON sidecar (``<checkpoint>.json``) carries the detector config and free-form
metadata such as the defense that hardened the weights.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..autodiff.tensor import Value
from .model import DetectorConfig, DetectorParams, init_params

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MAGIC = b"ADVF"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes or sidecar could not be decoded"""
    pass


class CheckpointCodec:
    @staticmethod
    def serialize(params: DetectorParams) -> bytes:
        """Encode every named tensor as float64"""
        chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
        for name in params.names():
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", data.ndim))
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
            chunks.append(data.tobytes())
        return b"".join(chunks)

    @staticmethod
    def deserialize(blob: bytes) -> DetectorParams:
        """Decode bytes written by ``serialize``"""
        try:
            if blob[:4] != MAGIC:
                raise ValueError(f"bad magic {blob[:4]!r}")
            version, count = struct.unpack_from("<HI", blob, 4)
            if version != VERSION:
                raise ValueError(f"unsupported version {version}")
            offset = 10
            tensors: Dict[str, Value] = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (ndim,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                shape = struct.unpack_from(f"<{ndim}I", blob, offset)
                offset += 4 * ndim
                size = int(np.prod(shape))
                payload = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
                offset += 8 * size
                tensors[name] = Value(payload.reshape(shape).astype(np.float64), requires_grad=True)
            if offset != len(blob):
                raise ValueError(f"{len(blob) - offset} trailing bytes")
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise CheckpointError(f"Error deserializing checkpoint: {e}") from e
        return DetectorParams(tensors)

    @staticmethod
    def validate(params: DetectorParams, cfg: DetectorConfig) -> Optional[str]:
        """Reason the params cannot drive a detector built from ``cfg``, or None"""
        expected = init_params(cfg, np.random.default_rng(0))
        if expected.names() != params.names():
            missing = sorted(set(expected.names()) - set(params.names()))
            extra = sorted(set(params.names()) - set(expected.names()))
            return f"Tensor names differ (missing {missing}, unexpected {extra})"
        for name in expected.names():
            if expected[name].shape != params[name].shape:
                return f"Tensor {name} has shape {params[name].shape}, expected {expected[name].shape}"
        if not params.all_finite():
            return "Checkpoint contains non-finite weights"
        return None


def sidecar_path(path: PathLike) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(params: DetectorParams, cfg: DetectorConfig, path: PathLike,
                    metadata: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CheckpointCodec.serialize(params))
    sidecar = sidecar_path(path)
    sidecar.write_text(json.dumps({"detector": cfg.to_dict(), "metadata": metadata or {}},
                                  indent=2, sort_keys=True))
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")
    return path, sidecar


def load_checkpoint(path: PathLike, cfg: Optional[DetectorConfig] = None
                    ) -> Tuple[DetectorParams, DetectorConfig, Dict[str, Any]]:
    """Params, the config they were trained with (unless ``cfg`` overrides it) and metadata."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Error reading checkpoint {path}: {e}") from e
    params = CheckpointCodec.deserialize(blob)
    metadata: Dict[str, Any] = {}
    sidecar = sidecar_path(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"Error reading checkpoint sidecar {sidecar}: {e}") from e
        metadata = meta.get("metadata", {})
        if cfg is None:
            cfg = DetectorConfig.from_dict(meta.get("detector", {}))
    elif cfg is None:
        logger.warning(f"No sidecar for {path}; assuming the default detector config")
        cfg = DetectorConfig()
    problem = CheckpointCodec.validate(params, cfg)
    if problem:
        raise CheckpointError(f"Checkpoint {path} does not match detector config: {problem}")
    return params, cfg, metadata
