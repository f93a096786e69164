"""Deterministic binary container for parameters, optimizer state, and metadata.

Layout: 8-byte magic | u32 LE header length | UTF-8 JSON header | raw array payload.
The header carries a format-version string, kind, config, metadata, the array
index (name/dtype/shape/offset), and a CRC-64 of the payload. Writes are atomic
and contain no timestamps, so identical state produces byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import crc64

MAGIC = b"SSWLCKPT"
FORMAT_VERSION = "1"
_LEN = struct.Struct("<I")

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerFormatError(Exception):
    pass


@dataclass
class Container:
    kind: str
    config: dict
    meta: dict
    arrays: dict[str, np.ndarray]
    format_version: str = FORMAT_VERSION


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype in (np.float32, np.dtype("<f4")):
        return arr.astype("<f4", copy=False)
    if arr.dtype in (np.float64, np.dtype("<f8")):
        return arr.astype("<f8", copy=False)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype("<i8")
    raise ValueError(f"unsupported array dtype {arr.dtype}")


def save_container(path: Path | str, container: Container) -> None:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(container.arrays):
        arr = _canonical(container.arrays[name])
        data = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": container.format_version,
        "kind": container.kind,
        "config": container.config,
        "meta": container.meta,
        "arrays": index,
        "payload_crc64": crc64(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def load_container(path: Path | str) -> Container:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + _LEN.size:
        raise ContainerFormatError(f"{path}: file shorter than the container header")
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    (hlen,) = _LEN.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if len(raw) < start + hlen:
        raise ContainerFormatError(f"{path}: truncated header")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = raw[start + hlen :]
    if crc64(payload) != header["payload_crc64"]:
        raise ContainerFormatError(f"{path}: payload CRC-64 mismatch")
    arrays = {}
    for item in header["arrays"]:
        dtype = _DTYPES.get(item["dtype"])
        if dtype is None:
            raise ContainerFormatError(f"{path}: unsupported dtype {item['dtype']}")
        begin, nbytes = item["offset"], item["nbytes"]
        if begin + nbytes > len(payload):
            raise ContainerFormatError(f"{path}: array {item['name']} exceeds payload")
        arr = np.frombuffer(payload[begin : begin + nbytes], dtype=dtype)
        arrays[item["name"]] = arr.reshape(item["shape"]).copy()
    return Container(
        kind=header["kind"],
        config=header["config"],
        meta=header["meta"],
        arrays=arrays,
        format_version=header["format_version"],
    )


def describe(path: Path | str) -> str:
    """Human-readable manifest of a container file."""
    container = load_container(path)
    lines = [
        f"file: {path}",
        f"format_version: {container.format_version}",
        f"kind: {container.kind}",
    ]
    if container.config:
        lines.append("config:")
        for key in sorted(container.config):
            lines.append(f"  {key} = {container.config[key]}")
    if container.meta:
        lines.append("meta:")
        for key in sorted(container.meta):
            lines.append(f"  {key} = {container.meta[key]}")
    lines.append(f"arrays ({len(container.arrays)}):")
    total = 0
    for name in sorted(container.arrays):
        arr = container.arrays[name]
        total += arr.size
        lines.append(f"  {name}  dtype={arr.dtype.str} shape={tuple(arr.shape)}")
    lines.append(f"total array elements: {total}")
    return "\n".join(lines)
