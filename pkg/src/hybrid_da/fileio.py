"""The "HDA1" container used for fields, cycle archives and datasets.

Layout (little-endian)::

    b"HDA1"  u8 version  u8 kind  u32 header_len  header (UTF-8 JSON)  payload

``kind`` is 0 for a grid field, 1 for a spectral field and 2 for a generic
container of named arrays. The payload is contiguous 8-byte floats: (var,
lat, lon) for grid fields, (var, coeff) with re/im interleaved for spectral
fields, and the listed arrays back to back for containers. Integer arrays
are stored as floats and restored to their recorded dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .sphere import GaussGrid, GridField, RingGrid, SpectralField

MAGIC = b"HDA1"
VERSION = 1
KIND_GRID, KIND_SPECTRAL, KIND_CONTAINER = 0, 1, 2
_PREAMBLE = struct.Struct("<4sBBI")


class MalformedFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _pack(kind: int, header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREAMBLE.pack(MAGIC, VERSION, kind, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def _unpack(data: bytes) -> tuple[int, dict, int]:
    if len(data) < _PREAMBLE.size:
        raise MalformedFileError("file shorter than the fixed preamble", len(data))
    magic, version, kind, head_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedFileError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise MalformedFileError(f"unsupported version {version}", 4)
    if kind not in (KIND_GRID, KIND_SPECTRAL, KIND_CONTAINER):
        raise MalformedFileError(f"unknown kind {kind}", 5)
    start = _PREAMBLE.size
    if len(data) < start + head_len:
        raise MalformedFileError("header truncated", len(data))
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"unreadable header: {exc}", start) from None
    return kind, header, start + head_len


def _take(data: bytes, offset: int, count: int) -> np.ndarray:
    end = offset + 8 * count
    if end > len(data):
        raise MalformedFileError(f"payload truncated: need {8 * count} bytes", len(data))
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(float)


def _grid_meta(grid) -> dict:
    if isinstance(grid, RingGrid):
        return {"type": "ring", "nlat": 1, "nlon": grid.n}
    return {"type": "gauss", "nlat": grid.nlat, "nlon": grid.nlon}


def _grid_from_meta(meta: dict):
    if meta["type"] == "ring":
        return RingGrid(meta["nlon"])
    return GaussGrid(meta["nlat"], meta["nlon"])


def field_to_bytes(field: GridField | SpectralField) -> bytes:
    if isinstance(field, GridField):
        header = {"kind": "grid", "nvar": field.nvar, "grid": _grid_meta(field.grid), "names": list(field.names)}
        return _pack(KIND_GRID, header, [field.values])
    header = {"kind": "spectral", "nvar": field.nvar, "truncation": field.truncation,
              "basis": field.basis, "names": list(field.names)}
    return _pack(KIND_SPECTRAL, header, [field.as_reals()])


def field_from_bytes(data: bytes) -> GridField | SpectralField:
    kind, header, offset = _unpack(data)
    try:
        if kind == KIND_GRID:
            grid = _grid_from_meta(header["grid"])
            nvar = header["nvar"]
            values = _take(data, offset, nvar * grid.nlat * grid.nlon).reshape(nvar, grid.nlat, grid.nlon)
            end = offset + values.nbytes
            field = GridField(grid, values, tuple(header["names"]))
        elif kind == KIND_SPECTRAL:
            T, nvar, basis = header["truncation"], header["nvar"], header["basis"]
            ncoef = SpectralField.ncoef_for(T, basis)
            reals = _take(data, offset, nvar * 2 * ncoef)
            end = offset + reals.nbytes
            field = SpectralField(T, reals.view(complex).reshape(nvar, ncoef), tuple(header["names"]), basis)
        else:
            raise MalformedFileError("container file is not a single field", 5)
    except KeyError as exc:
        raise MalformedFileError(f"header lacks {exc}", _PREAMBLE.size) from None
    if end != len(data):
        raise MalformedFileError(f"{len(data) - end} trailing bytes after payload", end)
    return field


def write_field(path, field) -> None:
    Path(path).write_bytes(field_to_bytes(field))


def read_field(path):
    return field_from_bytes(Path(path).read_bytes())


def container_to_bytes(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        payload.append(arr.astype(float))
    return _pack(KIND_CONTAINER, {"kind": "container", "meta": meta, "arrays": index}, payload)


def container_from_bytes(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    kind, header, offset = _unpack(data)
    if kind != KIND_CONTAINER:
        raise MalformedFileError("not a container file", 5)
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        flat = _take(data, offset, count)
        arrays[entry["name"]] = flat.reshape(shape).astype(np.dtype(entry["dtype"]))
        offset += 8 * count
    if offset != len(data):
        raise MalformedFileError(f"{len(data) - offset} trailing bytes after payload", offset)
    return header.get("meta", {}), arrays


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(container_to_bytes(meta, arrays))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return container_from_bytes(Path(path).read_bytes())
