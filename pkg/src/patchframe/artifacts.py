"""Artifact persistence: payload files plus a JSON metadata sidecar.

Every record's metadata carries at least kind, seed, config_digest and
created_utc. Weight payloads use a small self-describing binary format
(header JSON + raw little-endian float64 buffers) so that two runs with
the same seed produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

REQUIRED_META = ("kind", "seed", "config_digest", "created_utc")

_MAGIC = b"PFW1"


@dataclass
class ArtifactRecord:
    kind: str
    payload_path: str
    metadata: dict


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return sha256_bytes(json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def _meta_path(payload_path) -> str:
    return str(payload_path) + ".json"


def write_record(payload_path, kind: str, seed: int, cfg_digest: str, extra: dict | None = None) -> ArtifactRecord:
    """Attach the metadata sidecar to an already-written payload."""
    meta = {
        "kind": kind,
        "seed": int(seed),
        "config_digest": cfg_digest,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "payload_sha256": sha256_file(payload_path),
    }
    if extra:
        meta.update(extra)
    with open(_meta_path(payload_path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ArtifactRecord(kind, str(payload_path), meta)


def read_record(payload_path) -> ArtifactRecord:
    with open(_meta_path(payload_path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    missing = [k for k in REQUIRED_META if k not in meta]
    if missing:
        raise ValueError(f"artifact metadata missing required keys: {missing}")
    if not os.path.exists(payload_path):
        raise FileNotFoundError(f"artifact payload missing: {payload_path}")
    return ArtifactRecord(meta["kind"], str(payload_path), meta)


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Deterministic binary container for named float64 arrays."""
    header = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in arrays:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"not a patchframe array container: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        out = {}
        for entry in header:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return out
