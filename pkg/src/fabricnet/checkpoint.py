"""Binary weight checkpoints with integrity checking.

Layout, all integers little endian:

    magic   8 bytes  b"FABNET01"
    version u32
    hlen    u32      byte length of the JSON header
    header  hlen bytes, UTF-8 JSON with sorted keys:
            {"entries": [...], "meta": {...}, "spec": "...", "version": 1}
            each entry: name, dtype, shape, offset, nbytes
    payload raw array bytes, entries packed back to back
    crc     u32      CRC32 of every preceding byte

Optimizer moments ride along as entries under the reserved ``optim.``
prefix. Saving the same state twice produces identical bytes: entries
are sorted by name and nothing time-dependent is written.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointCrcError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ValidationError,
)

MAGIC = b"FABNET01"
VERSION = 1
_PRELUDE = struct.Struct("<8sII")
_OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    """Everything load_checkpoint recovers from one file."""

    version: int
    spec: str
    state: dict
    meta: dict = field(default_factory=dict)
    optim: dict | None = None


def _le_dtype(dtype):
    dt = np.dtype(dtype)
    if dt.byteorder == ">":
        dt = dt.newbyteorder("<")
    return dt


def _model_state(model):
    if isinstance(model, dict):
        return dict(model), ""
    state_dict = getattr(model, "state_dict", None)
    if state_dict is None:
        raise ValidationError("save_checkpoint needs a dict of arrays or an object with state_dict()")
    spec = getattr(model, "spec", None)
    spec_text = getattr(spec, "canonical", "") if spec is not None else ""
    return state_dict(), spec_text


def save_checkpoint(path, model, meta=None, optim=None, spec_text=None):
    """Write a model (or name-keyed array dict) to ``path``; returns byte count.

    ``optim`` is an optional mapping with array dicts "m" and "v" plus
    an integer step "t", stored under the reserved ``optim.`` prefix.
    ``spec_text`` overrides the spec string taken from the model.
    """
    state, model_spec = _model_state(model)
    if not state:
        raise ValidationError("refusing to save an empty state")
    if spec_text is None:
        spec_text = model_spec
    for name in state:
        if name.startswith(_OPTIM_PREFIX):
            raise ValidationError(f"state name {name!r} collides with the optimizer prefix")
    meta = dict(meta or {})
    flat = dict(state)
    if optim is not None:
        for kind in ("m", "v"):
            for name, arr in optim[kind].items():
                flat[f"{_OPTIM_PREFIX}{kind}.{name}"] = arr
        meta["optim_step"] = int(optim["t"])

    entries = []
    chunks = []
    offset = 0
    for name in sorted(flat):
        arr = np.ascontiguousarray(flat[name])
        dt = _le_dtype(arr.dtype)
        arr = arr.astype(dt, copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dt.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"entries": entries, "meta": meta, "spec": spec_text, "version": VERSION},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    body = _PRELUDE.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns a Checkpoint.

    Raises CheckpointMagicError, CheckpointVersionError,
    CheckpointTruncatedError or CheckpointCrcError as applicable.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(blob) < _PRELUDE.size:
        raise CheckpointTruncatedError(f"file holds {len(blob)} bytes, prelude needs {_PRELUDE.size}")
    magic, version, hlen = _PRELUDE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}, expected {VERSION}")
    if len(blob) < _PRELUDE.size + hlen + 4:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(blob[_PRELUDE.size : _PRELUDE.size + hlen].decode("utf-8"))
        entries = header["entries"]
        meta = header["meta"]
        spec_text = header["spec"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None

    payload_start = _PRELUDE.size + hlen
    payload_len = 0
    for e in entries:
        payload_len = max(payload_len, int(e["offset"]) + int(e["nbytes"]))
    total = payload_start + payload_len + 4
    if len(blob) < total:
        raise CheckpointTruncatedError(f"file holds {len(blob)} bytes, header promises {total}")
    if len(blob) > total:
        raise CheckpointError(f"{len(blob) - total} trailing bytes after the checkpoint")

    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointCrcError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    flat = {}
    for e in entries:
        try:
            dt = np.dtype(e["dtype"])
            shape = tuple(int(d) for d in e["shape"])
            off, nbytes = int(e["offset"]), int(e["nbytes"])
        except (TypeError, ValueError, KeyError) as exc:
            raise CheckpointError(f"malformed entry: {exc}") from None
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if expected != nbytes:
            raise CheckpointError(f"entry {e.get('name')!r}: shape/dtype imply {expected} bytes, not {nbytes}")
        start = payload_start + off
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=start)
        flat[e["name"]] = arr.reshape(shape).copy()

    state, moments = {}, {"m": {}, "v": {}}
    for name, arr in flat.items():
        if name.startswith(_OPTIM_PREFIX):
            kind, _, rest = name[len(_OPTIM_PREFIX) :].partition(".")
            if kind not in moments or not rest:
                raise CheckpointError(f"malformed optimizer entry {name!r}")
            moments[kind][rest] = arr
        else:
            state[name] = arr
    optim = None
    if moments["m"] or moments["v"]:
        optim = {"m": moments["m"], "v": moments["v"], "t": int(meta.get("optim_step", 0))}
    return Checkpoint(version=version, spec=spec_text, state=state, meta=meta, optim=optim)
