"""Shared plumbing: canonical serialization, seeded streams, checkpoint blobs.

Everything here exists so that two runs with the same master seed produce
byte-identical artifacts, including under parallel execution.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np


def fmt_float(x: float) -> str:
    """Canonical decimal form of a float: 17 significant digits, exact round-trip.

    Integral values keep a trailing ``.0`` so they parse back as floats.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value cannot be serialized: {x}")
    s = "%.17g" % x
    if "." not in s and "e" not in s and "E" not in s and "n" not in s:
        s += ".0"
    return s


def canon_json(obj) -> str:
    """Deterministic JSON encoding: fixed key order (insertion), canonical floats."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj))
    if isinstance(obj, np.ndarray):
        return canon_json(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canon_json(v) for v in obj) + "]"
    if isinstance(obj, dict):
        parts = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"non-string key: {k!r}")
            parts.append(json.dumps(k, ensure_ascii=False) + ":" + canon_json(v))
        return "{" + ",".join(parts) + "}"
    raise TypeError(f"cannot canonically serialize {type(obj)}")


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Counter-based stream for (master seed, index path).

    Streams for distinct paths are independent, so work items can run in any
    order (or in parallel) and still see identical randomness.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def stable_id(payload: bytes, length: int = 12) -> str:
    """Short content hash used as checkpoint/object identity."""
    return hashlib.sha256(payload).hexdigest()[:length]


# ---------------------------------------------------------------------------
# Versioned binary blobs: plain-text header, then raw little-endian arrays.
#
#   <format-id> v<version>
#   meta <key> <value>
#   array <name> <dtype> <dim0,dim1,...>
#   ---
#   <concatenated raw bytes, C order, in header order>
# ---------------------------------------------------------------------------

_BLOB_SEP = b"---\n"


def write_blob(path, format_id: str, version: int, meta: dict, arrays: dict) -> int:
    """Write a checkpoint blob; returns byte count. Array order follows dict order."""
    lines = [f"{format_id} v{version}"]
    for k, v in meta.items():
        sv = str(v)
        if "\n" in k or "\n" in sv or " " in k:
            raise ValueError(f"invalid meta entry: {k!r}")
        lines.append(f"meta {k} {sv}")
    buf = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dt = "f8"
        elif arr.dtype == np.int64:
            dt = "i8"
        else:
            raise TypeError(f"unsupported array dtype {arr.dtype} for {name}")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {dt} {shape}")
        buf += arr.astype("<" + dt).tobytes()
    header = ("\n".join(lines) + "\n").encode("utf-8") + _BLOB_SEP
    data = header + bytes(buf)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_blob(path, format_id: str, max_version: int = 1):
    """Read a checkpoint blob; returns (version, meta, arrays). Raises on mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    sep = data.find(_BLOB_SEP)
    if sep < 0:
        raise ValueError(f"{path}: not a checkpoint blob (missing header terminator)")
    head = data[:sep].decode("utf-8").splitlines()
    body = data[sep + len(_BLOB_SEP):]
    first = head[0].split()
    if len(first) != 2 or first[0] != format_id or not first[1].startswith("v"):
        raise ValueError(f"{path}: expected format '{format_id}', got '{head[0]}'")
    version = int(first[1][1:])
    if version > max_version:
        raise ValueError(f"{path}: unsupported {format_id} version {version}")
    meta = {}
    specs = []
    for line in head[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, v = rest.split(" ", 1)
            meta[k] = v
        elif kind == "array":
            name, dt, shape = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            specs.append((name, dt, dims))
        else:
            raise ValueError(f"{path}: unknown header line kind '{kind}'")
    arrays = {}
    off = 0
    for name, dt, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 8
        if off + nbytes > len(body):
            raise ValueError(f"{path}: truncated blob while reading array '{name}'")
        arrays[name] = np.frombuffer(body[off:off + nbytes], dtype="<" + dt).reshape(dims).copy()
        off += nbytes
    if off != len(body):
        raise ValueError(f"{path}: {len(body) - off} trailing bytes after declared arrays")
    return version, meta, arrays
