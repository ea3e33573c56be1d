"""Single-file checkpoints: magic, length-prefixed JSON header, raw float64 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError
from .model import ModelConfig, ModelParams, Variant, param_shapes
from .tensor import parameter

MAGIC = b"BGLTOY01"
FORMAT = "bagel-toy-checkpoint/1"


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None,
                    state: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``params`` (or an explicit ``state`` such as EMA weights) to ``path``."""
    state = params.state_dict() if state is None else state
    entries, offset, blobs = [], 0, []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "format": FORMAT,
        "variant": params.config.variant.value,
        "config": params.config.to_dict(),
        "tensors": entries,
        "meta": meta or {},
    }, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    try:
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise LoadError(f"{path}: not a checkpoint (bad magic)")
            (n,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(n))
    except (OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: unreadable checkpoint ({exc})") from exc
    if header.get("format") != FORMAT:
        raise LoadError(f"{path}: unsupported format {header.get('format')!r}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path, variant: Variant | str | None = None) -> tuple[ModelParams, dict]:
    """Read a checkpoint; ``variant`` (if given) must match the stored one."""
    header, start = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    if variant is not None and Variant.parse(variant) is not cfg.variant:
        raise LoadError(f"{path}: checkpoint holds a {cfg.variant.value} model, "
                        f"{Variant.parse(variant).value} requested")
    payload = Path(path).read_bytes()[start:]
    expected = param_shapes(cfg)
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if expected.get(e["name"]) != shape:
            raise LoadError(f"{path}: tensor {e['name']} shape {shape} does not fit the config")
        count = int(np.prod(shape))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise LoadError(f"{path}: truncated payload")
        tensors[e["name"]] = parameter(np.frombuffer(payload, "<f8", count, e["offset"]).reshape(shape).copy())
    missing = set(expected) - set(tensors)
    if missing:
        raise LoadError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return ModelParams(cfg, tensors), header.get("meta", {})
