"""Named-array checkpoint files: one binary blob plus a JSON manifest.

The blob is the concatenation of the arrays' little-endian bytes in manifest
order; the manifest records each array's shape and dtype plus free-form
metadata. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPE_TAGS = {
    "f32": "<f4",
    "f64": "<f8",
    "i64": "<i8",
    "i32": "<i4",
    "u8": "|u1",
}
_TAG_FOR_KIND = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint blob and its manifest disagree."""


def _blob_path(path) -> Path:
    path = Path(path)
    if path.suffix != ".ckpt":
        path = path.with_suffix(".ckpt")
    return path


def save_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write ``<name>.ckpt`` + ``<name>.json`` for an ordered name->array map."""
    path = _blob_path(path)
    manifest = {"arrays": {}, "meta": meta or {}}
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            native = arr.dtype.newbyteorder("=")
            if native not in _TAG_FOR_KIND:
                raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
            tag = _TAG_FOR_KIND[native]
            payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag])
            fh.write(payload.tobytes())
            manifest["arrays"][name] = {"shape": list(arr.shape), "dtype": tag}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh)
    return path


def load_arrays(path):
    """Read a checkpoint back as (name->array dict, meta dict)."""
    path = _blob_path(path)
    try:
        with open(path.with_suffix(".json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest for {path}: {exc}") from exc
    raw = path.read_bytes()
    arrays = {}
    offset = 0
    for name, entry in manifest["arrays"].items():
        tag = entry["dtype"]
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag!r} for {name!r}")
        dtype = np.dtype(_DTYPE_TAGS[tag])
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"blob truncated at array {name!r}")
        arrays[name] = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"blob has {len(raw) - offset} trailing bytes")
    return arrays, manifest.get("meta", {})
