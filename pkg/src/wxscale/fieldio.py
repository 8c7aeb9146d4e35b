"""Field snapshot files: JSON sidecar header plus raw little-endian f32 payload.

A snapshot named ``X`` is stored as ``X.json`` (schema, grid, timestamp,
endianness, payload checksum) next to ``X.f32`` (raw float32 values in
channel, then lat, then lon order). Values are float64 in memory; files use
float32, which is enough for forecast data. Round-trips are bit-exact for
float32-representable values.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ChecksumError, SchemaError
from .grid import ChannelSchema, FieldState, GridSpec
from .util import atomic_write_bytes, atomic_write_text, sha256_bytes, stable_json_dumps

FORMAT_VERSION = 1
_DTYPE = "<f4"


def write_field(state: FieldState, base_path: str | Path) -> tuple[Path, Path]:
    """Write ``<base>.json`` + ``<base>.f32``; returns the two paths."""
    base = Path(base_path)
    payload = np.asarray(state.values, dtype=_DTYPE).tobytes(order="C")
    payload_path = base.with_suffix(".f32")
    header = {
        "format_version": FORMAT_VERSION,
        "schema": state.schema.to_dict(),
        "grid": state.grid.to_dict(),
        "timestamp": state.timestamp,
        "dtype": _DTYPE,
        "order": ["channel", "lat", "lon"],
        "payload": payload_path.name,
        "payload_bytes": len(payload),
        "payload_sha256": sha256_bytes(payload),
    }
    atomic_write_bytes(payload_path, payload)
    header_path = base.with_suffix(".json")
    atomic_write_text(header_path, stable_json_dumps(header))
    return header_path, payload_path


def read_field(header_path: str | Path) -> FieldState:
    """Load a snapshot, verifying the payload checksum."""
    header_path = Path(header_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported field file version {header.get('format_version')}")
    if header.get("dtype") != _DTYPE:
        raise SchemaError(f"unsupported payload dtype {header.get('dtype')}")
    payload_path = header_path.parent / header["payload"]
    payload = payload_path.read_bytes()
    digest = sha256_bytes(payload)
    if digest != header["payload_sha256"]:
        raise ChecksumError(
            f"{payload_path.name}: payload checksum {digest[:12]}... does not match "
            f"header {header['payload_sha256'][:12]}..."
        )
    schema = ChannelSchema.from_dict(header["schema"])
    grid = GridSpec.from_dict(header["grid"])
    values = np.frombuffer(payload, dtype=_DTYPE).astype(np.float64)
    values = values.reshape(schema.total, grid.n_lat, grid.n_lon)
    return FieldState(schema, grid, values, timestamp=int(header["timestamp"]))
