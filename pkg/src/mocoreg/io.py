"""Single-file containers for volumes, masks and bandlimited velocities.

Both containers are an 8-byte magic, a little-endian u32 giving the length of
a UTF-8 JSON header, the header itself, then the raw payload. Volume payloads
are stored with x varying fastest.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .spectral import BandlimitedVelocity, SpectralOperators
from .volume import Grid, Mask3, Volume3

MVOL_MAGIC = b"MVOL0001"
BVEL_MAGIC = b"BVEL0001"
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(blob: bytes, magic: bytes, path) -> tuple[dict, bytes]:
    if len(blob) < 12 or blob[:8] != magic:
        raise FormatError(f"{path}: not a {magic[:4].decode()} container")
    (n,) = struct.unpack("<I", blob[8:12])
    if 12 + n > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    return header, blob[12 + n:]


def encode_volume(vol) -> bytes:
    """MVOL bytes for a :class:`Volume3` (float32) or :class:`Mask3` (u8)."""
    if isinstance(vol, Mask3):
        dtype, arr = "u8", vol.data.astype(np.uint8)
    elif isinstance(vol, Volume3):
        dtype, arr = "f32le", vol.data.astype("<f4")
    else:
        raise TypeError(f"cannot encode {type(vol).__name__}")
    header = {
        "dims": [int(d) for d in vol.dims],
        "spacing_mm": [float(s) for s in vol.spacing_mm],
        "origin_mm": [float(o) for o in vol.origin_mm],
        "dtype": dtype,
    }
    return _pack(MVOL_MAGIC, header, arr.tobytes(order="F"))


def decode_volume(blob: bytes, path="<bytes>"):
    header, payload = _unpack(blob, MVOL_MAGIC, path)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {dtype!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        grid = Grid(dims, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    dt = _DTYPES[dtype]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    if dtype == "u8":
        return Mask3.on_grid(arr != 0, grid)
    return Volume3.on_grid(arr.astype(np.float64), grid)


def write_volume(path, vol) -> Path:
    path = Path(path)
    path.write_bytes(encode_volume(vol))
    return path


def read_volume(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror or exc}") from None
    return decode_volume(blob, path)


def read_mask(path) -> Mask3:
    v = read_volume(path)
    if isinstance(v, Mask3):
        return v
    return Mask3.on_grid(v.data >= 0.5, v.grid)


def encode_velocity(v0: BandlimitedVelocity, ops: SpectralOperators) -> bytes:
    c = np.asarray(v0.coeffs)
    header = {"band": ops.band, "grid_dims": list(ops.grid_dims), "alpha": ops.alpha, "p": ops.power}
    # component-major, then the three frequency axes with the last one fastest
    return _pack(BVEL_MAGIC, header, c.astype("<c8").tobytes(order="C"))


def decode_velocity(blob: bytes, path="<bytes>") -> tuple[BandlimitedVelocity, SpectralOperators]:
    header, payload = _unpack(blob, BVEL_MAGIC, path)
    try:
        ops = SpectralOperators(int(header["band"]), header["grid_dims"], float(header["alpha"]), int(header["p"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    shape = (3, ops.band, ops.band, ops.band)
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    c = np.frombuffer(payload, dtype="<c8").reshape(shape).astype(np.complex128)
    return BandlimitedVelocity(c), ops


def write_velocity(path, v0: BandlimitedVelocity, ops: SpectralOperators) -> Path:
    path = Path(path)
    path.write_bytes(encode_velocity(v0, ops))
    return path


def read_velocity(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror or exc}") from None
    return decode_velocity(blob, path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, numpy scalars unwrapped, non-finite floats as null."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj) + "\n")
    return path


def strip_timing(obj):
    """Copy of a result tree without wall-clock fields, for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not (k == "wall_time" or k.startswith("wall_time"))}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
