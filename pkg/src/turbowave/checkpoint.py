"""Single-file checkpoint archives with integrity checking.

A deliberately boring container: magic + version, a JSON table of contents,
raw little-endian array bytes, and a SHA-256 trailer over everything before
it.  No timestamps or environment-dependent fields, so writing the same
arrays and metadata twice produces byte-identical files — which makes
"save(load(save(x))) == save(x)" a testable contract rather than a hope.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"TBWV0001"
_DIGEST_LEN = 64  # ascii hex sha256


def _to_numpy(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if not arr.flags.c_contiguous:
        # 0-d arrays are always contiguous, so this never promotes their rank
        arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_archive(path, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays (name -> tensor/ndarray) plus JSON-safe metadata."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = _to_numpy(arrays[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps(
        {"meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    blob = MAGIC + len(header).to_bytes(8, "little") + header + bytes(payload)
    digest = hashlib.sha256(blob).hexdigest().encode()
    Path(path).write_bytes(blob + digest)


def load_archive(path) -> tuple:
    """Read an archive back as ({name: torch.Tensor}, meta dict).

    Raises CheckpointError on wrong magic, version, truncation, or any
    integrity failure — never returns silently corrupted arrays.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 + _DIGEST_LEN:
        raise CheckpointError(f"checkpoint {path} is truncated")
    if blob[:4] != MAGIC[:4]:
        raise CheckpointError(f"{path} is not a checkpoint archive (bad magic)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"unsupported checkpoint version {blob[4:len(MAGIC)]!r}; expected {MAGIC[4:]!r}"
        )
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"checkpoint {path} failed its integrity check")

    header_len = int.from_bytes(body[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(body[header_start : header_start + header_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header") from exc
    payload = body[header_start + header_len :]

    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"checkpoint {path} payload is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(arr.copy())
    return arrays, header["meta"]
