"""
Flat key -> tensor archive.

Layout: the magic line, `meta <nbytes>` followed by a JSON record, then for every
tensor a header line `<key> <ndim> <dim_1> ... <dim_n>` followed by the values as
little-endian float64 in row-major order.
"""
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from app.models.schemas import RunConfig
from app.services.head import VSFormer
from app.services.numerics import Module
from app.utils import constants
from app.utils.error_handler import CheckpointError

logger = logging.getLogger(__name__)

OPTIMIZER_PREFIX = "optim."


def save_checkpoint(
    path: Union[str, Path],
    tensors: Dict[str, np.ndarray],
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    buffer = io.BytesIO()
    buffer.write(constants.CHECKPOINT_MAGIC)
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buffer.write(f"meta {len(meta)}\n".encode("ascii"))
    buffer.write(meta + b"\n")
    for key, value in tensors.items():
        if any(ch.isspace() for ch in key):
            raise CheckpointError("keys must not contain whitespace", key)
        array = np.asarray(value, dtype=np.float64)
        dims = " ".join(str(extent) for extent in array.shape)
        buffer.write(f"{key} {array.ndim} {dims}".rstrip().encode("ascii") + b"\n")
        buffer.write(np.ascontiguousarray(array).astype("<f8").tobytes())
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(buffer.getvalue())
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {target}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """(metadata, tensors); any structural damage raises CheckpointError naming the key"""
    source = Path(path)
    if not source.is_file():
        raise CheckpointError(f"file not found: {source}", "<file>")
    stream = io.BytesIO(source.read_bytes())
    if stream.readline() != constants.CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic line)", "<header>")

    meta_line = stream.readline().split()
    if len(meta_line) != 2 or meta_line[0] != b"meta":
        raise CheckpointError("missing metadata record", "meta")
    try:
        metadata = json.loads(stream.read(int(meta_line[1])).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata ({exc})", "meta")
    stream.readline()

    tensors: Dict[str, np.ndarray] = {}
    while True:
        header = stream.readline()
        if not header:
            break
        parts = header.decode("ascii", errors="replace").split()
        key = parts[0] if parts else "<blank>"
        try:
            ndim = int(parts[1])
            shape = tuple(int(v) for v in parts[2:2 + ndim])
        except (IndexError, ValueError):
            raise CheckpointError("malformed tensor header", key)
        if len(shape) != ndim or len(parts) != 2 + ndim:
            raise CheckpointError("malformed tensor header", key)
        count = int(np.prod(shape)) if shape else 1
        raw = stream.read(count * 8)
        if len(raw) != count * 8:
            raise CheckpointError(f"truncated data ({len(raw)} of {count * 8} bytes)", key)
        array = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.isfinite(array).all():
            raise CheckpointError("non-finite values", key)
        if key in tensors:
            raise CheckpointError("duplicate key", key)
        tensors[key] = array
    return metadata, tensors


def restore_module(module: Module, tensors: Dict[str, np.ndarray]) -> None:
    """Copy archived values into the module; every parameter and buffer must be present"""
    expected = set()
    for key, param in module.named_parameters():
        expected.add(key)
        if key not in tensors:
            raise CheckpointError("missing from archive", key)
        if tensors[key].shape != param.shape:
            raise CheckpointError(f"shape {tensors[key].shape} does not match model shape {param.shape}", key)
        param.assign(tensors[key])
    for key, owner, attr in module.named_buffers():
        expected.add(key)
        if key not in tensors:
            raise CheckpointError("missing from archive", key)
        current = np.asarray(getattr(owner, attr))
        if tensors[key].shape != current.shape:
            raise CheckpointError(f"shape {tensors[key].shape} does not match model shape {current.shape}", key)
        setattr(owner, attr, tensors[key].copy())
    unknown = sorted(k for k in tensors if k not in expected and not k.startswith(OPTIMIZER_PREFIX))
    if unknown:
        raise CheckpointError("not part of this model", unknown[0])


def model_metadata(model: VSFormer, **extra: Any) -> Dict[str, Any]:
    return {
        "config": model.cfg.model_dump(mode="json"),
        "num_classes": model.num_classes,
        "trained": model.trained,
        **extra,
    }


def save_model(path: Union[str, Path], model: VSFormer, optimizer_state: Optional[Dict[str, np.ndarray]] = None, **extra: Any) -> None:
    tensors = dict(model.state())
    for key, value in (optimizer_state or {}).items():
        tensors[f"{OPTIMIZER_PREFIX}{key}"] = value
    save_checkpoint(path, tensors, model_metadata(model, **extra))


def load_model(path: Union[str, Path]) -> Tuple[VSFormer, Dict[str, Any], Dict[str, np.ndarray]]:
    """Rebuild a VSFormer from its archive: (model, metadata, optimizer tensors)"""
    metadata, tensors = load_checkpoint(path)
    if "config" not in metadata or "num_classes" not in metadata:
        raise CheckpointError("metadata lacks config/num_classes", "meta")
    try:
        cfg = RunConfig.model_validate(metadata["config"])
    except ValueError as exc:
        raise CheckpointError(f"stored config is invalid ({exc})", "meta.config")
    # values are overwritten below, so the initial draw does not matter
    model = VSFormer(cfg, int(metadata["num_classes"]), np.random.default_rng(0))
    restore_module(model, tensors)
    model.trained = bool(metadata.get("trained", False))
    optimizer_state = {k[len(OPTIMIZER_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX)}
    logger.info(f"Loaded model from {path} (trained={model.trained})")
    return model, metadata, optimizer_state
