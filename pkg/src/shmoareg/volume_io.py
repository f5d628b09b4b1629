"""Binary volume and checkpoint files.

Volume file layout, all little-endian::

    magic   4s   b"SHMV"
    version u16  1
    dtype   u8   0 = float32 intensities/fields, 1 = uint16 labels
    chans   u32
    D H W   3×u32
    spacing 3×f32 (mm)
    payload chans·D·H·W values, row-major

Checkpoint layout::

    magic   4s   b"SHMC"
    version u16  1
    cfglen  u32, then cfglen bytes of UTF-8 config text
    count   u32
    count × (namelen u16, name bytes, ndim u8, ndim×u32 shape, float64 payload)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SHMV"
CKPT_MAGIC = b"SHMC"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIII3f")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


class VolumeFormatError(IOError):
    pass


@dataclass
class Volume:
    """C×D×H×W intensities (or displacement components) with voxel spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[None]
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass
class SegVolume:
    """D×H×W integer label map with voxel spacing."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.uint16)
        self.spacing = tuple(float(s) for s in self.spacing)


def encode_volume(vol) -> bytes:
    if isinstance(vol, SegVolume):
        code, arr = 1, vol.labels[None]
    else:
        code, arr = 0, vol.data
    c, d, h, w = arr.shape
    head = _HEADER.pack(MAGIC, VERSION, code, c, d, h, w, *vol.spacing)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_volume(buf: bytes):
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"truncated header: {len(buf)} bytes at offset 0, need {_HEADER.size}")
    magic, version, code, c, d, h, w, *spacing = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version} at offset 4")
    if code not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code} at offset 6")
    dt = _DTYPES[code]
    n = c * d * h * w
    need = _HEADER.size + n * dt.itemsize
    if len(buf) != need:
        raise VolumeFormatError(f"payload starting at offset {_HEADER.size} has {len(buf) - _HEADER.size} bytes, "
                                f"expected {n * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size).reshape(c, d, h, w)
    spacing = tuple(float(s) for s in spacing)
    if code == 1:
        return SegVolume(arr[0].copy(), spacing)
    return Volume(arr.astype(np.float64), spacing)


def write_volume(path, vol):
    with open(path, "wb") as fh:
        fh.write(encode_volume(vol))


def read_volume(path):
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def encode_checkpoint(named_params, config_text: str = "") -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [struct.pack("<4sHI", CKPT_MAGIC, VERSION, len(cfg)), cfg]
    named_params = list(named_params)
    parts.append(struct.pack("<I", len(named_params)))
    for name, t in named_params:
        arr = np.asarray(getattr(t, "data", t), dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Returns (config text, {name: array}) preserving file order."""
    try:
        magic, version, cfglen = struct.unpack_from("<4sHI", buf, 0)
    except struct.error as exc:
        raise VolumeFormatError(f"truncated checkpoint header at offset 0: {exc}") from None
    if magic != CKPT_MAGIC:
        raise VolumeFormatError(f"bad checkpoint magic {magic!r} at offset 0")
    if version != VERSION:
        raise VolumeFormatError(f"unsupported checkpoint version {version} at offset 4")
    off = 10
    cfg = buf[off:off + cfglen].decode("utf-8")
    off += cfglen
    out = {}
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(count):
            start = off
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise VolumeFormatError(f"tensor {name!r} at offset {start} runs past end of file")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise VolumeFormatError(f"truncated checkpoint at offset {off}: {exc}") from None
    if off != len(buf):
        raise VolumeFormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    return cfg, out


def write_checkpoint(path, named_params, config_text=""):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(named_params, config_text))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
