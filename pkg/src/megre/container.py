"""The MET1 array container, model checkpoints and PGM previews.

Layout::

    b"MET1" | uint32 LE header length | UTF-8 JSON header | payloads

The header holds ``{"arrays": [{name, dtype, shape, axes}], "meta": {...}}``;
payloads are raw little-endian data concatenated in header order.  Complex
arrays (dtype ``c64``) are stored as interleaved float32 (real, imag) pairs.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MET1"
AXES = ("echo", "coil", "ky", "kx", "y", "x", "channel")
_DTYPES = {"f32": ("<f4", 4), "c64": ("<f4", 8), "u8": ("u1", 1)}


class ContainerError(Exception):
    """Base class for malformed container files."""


class BadMagicError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class TruncatedError(ContainerError):
    def __init__(self, array_name: str, expected: int, available: int):
        super().__init__(f"payload for array {array_name!r} truncated: needs {expected} bytes, {available} left")
        self.array_name = array_name


class UnknownDtypeError(ContainerError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if np.iscomplexobj(arr):
        return "c64"
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "u8"
    return "f32"


def _encode(arr: np.ndarray, tag: str) -> bytes:
    if tag == "c64":
        z = np.asarray(arr, dtype=np.complex64)
        pairs = np.stack([z.real, z.imag], axis=-1)
        return np.ascontiguousarray(pairs, dtype="<f4").tobytes()
    return np.ascontiguousarray(arr, dtype=_DTYPES[tag][0]).tobytes()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_container(arrays: dict[str, np.ndarray], meta: dict | None = None,
                   axes: dict[str, list[str]] | None = None) -> bytes:
    axes = axes or {}
    entries, payloads = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        labels = list(axes.get(name, []))
        bad = [a for a in labels if a not in AXES]
        if bad:
            raise ValueError(f"unknown axis labels {bad} for array {name!r}")
        if labels and len(labels) != arr.ndim:
            raise ValueError(f"array {name!r} has {arr.ndim} dims but {len(labels)} axis labels")
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "axes": labels})
        payloads.append(_encode(arr, tag))
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(payloads)


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                    axes: dict[str, list[str]] | None = None) -> None:
    """Serialize named arrays (f32, complex64 or u8) plus JSON metadata atomically."""
    atomic_write_bytes(path, pack_container(arrays, meta, axes))


def unpack_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a MET1 container (magic {blob[:4]!r})")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise HeaderError(f"header of {hlen} bytes extends past end of file")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        entries = header["arrays"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"invalid container header: {exc}") from exc
    offset = 8 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        name, tag, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        if tag not in _DTYPES:
            raise UnknownDtypeError(f"array {name!r} has unknown dtype {tag!r}")
        np_dtype, itemsize = _DTYPES[tag]
        nbytes = itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise TruncatedError(name, nbytes, len(blob) - offset)
        raw = np.frombuffer(blob, dtype=np_dtype, count=nbytes // np.dtype(np_dtype).itemsize, offset=offset)
        if tag == "c64":
            # reinterpreting the (real, imag) float pairs keeps signed zeros and NaN payloads
            arr = raw.astype(np.float32).view(np.complex64).reshape(shape)
        else:
            arr = raw.reshape(shape).astype(np.float32 if tag == "f32" else np.uint8)
        arrays[name] = arr
        offset += nbytes
    if offset != len(blob):
        raise HeaderError(f"{len(blob) - offset} trailing bytes after declared payloads")
    return arrays, meta


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and validate a container; returns (arrays, meta)."""
    return unpack_container(Path(path).read_bytes())


def write_pgm(path, image: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    """8-bit binary PGM (P5) of a real 2D image, linearly scaled to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
