"""Flat binary weight container.

Layout (all integers little-endian):

    8 bytes   magic  b"EMOWTS01"
    1 byte    container version (1)
    1 byte    precision: 4 = float32, 8 = float64
    records until EOF, each:
        u16   name length
        ...   name (UTF-8)
        u8    ndim
        u32 * ndim   dims
        raw little-endian scalars (ndim product * precision bytes)

Records are written in sorted-name order so equal parameter sets produce
byte-identical files. Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"EMOWTS01"
VERSION = 1
_PREC_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_PRECISION_BYTE = {"f32": 4, "f64": 8}
_BYTE_PRECISION = {4: "f32", 8: "f64"}


class ContainerError(ValueError):
    pass


def save_params(path_or_file, params: dict[str, np.ndarray], precision: str) -> None:
    if precision not in _PRECISION_BYTE:
        raise ContainerError(f"unknown precision {precision!r}")
    pbyte = _PRECISION_BYTE[precision]
    dtype = _PREC_TO_DTYPE[pbyte]

    def write(fh):
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, pbyte))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name])
            if arr.dtype.itemsize != pbyte:
                raise ContainerError(
                    f"parameter {name!r} has dtype {arr.dtype}, container precision is {precision}"
                )
            nbytes = name.encode("utf-8")
            if len(nbytes) > 0xFFFF:
                raise ContainerError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ContainerError(f"parameter {name!r} has too many dimensions")
            fh.write(struct.pack("<H", len(nbytes)))
            fh.write(nbytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(dtype, copy=False).tobytes(order="C"))

    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "wb") as fh:
            write(fh)
    else:
        write(path_or_file)


def load_params(path_or_file) -> tuple[dict[str, np.ndarray], str]:
    def read(fh) -> tuple[dict[str, np.ndarray], str]:
        header = fh.read(10)
        if len(header) != 10 or header[:8] != MAGIC:
            raise ContainerError("not a weight container (bad magic)")
        version, pbyte = struct.unpack("<BB", header[8:])
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if pbyte not in _PREC_TO_DTYPE:
            raise ContainerError(f"unsupported precision byte {pbyte}")
        dtype = _PREC_TO_DTYPE[pbyte]
        params: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise ContainerError("truncated record header")
            (nlen,) = struct.unpack("<H", head)
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = fh.read(count * pbyte)
            if len(raw) != count * pbyte:
                raise ContainerError(f"truncated data for parameter {name!r}")
            if name in params:
                raise ContainerError(f"duplicate parameter {name!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            arr.setflags(write=False)
            params[name] = arr
        return params, _BYTE_PRECISION[pbyte]

    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "rb") as fh:
            return read(fh)
    return read(path_or_file)


def dumps_params(params: dict[str, np.ndarray], precision: str) -> bytes:
    buf = io.BytesIO()
    save_params(buf, params, precision)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# raw tensor files (planar binary input for the CLI)
#
#     8 bytes  magic b"EMOTEN01"
#     u8       precision: 4 = float32, 8 = float64
#     u8       ndim
#     u32 * ndim  dims
#     raw little-endian scalars

TENSOR_MAGIC = b"EMOTEN01"


def save_raw_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype.itemsize not in _PREC_TO_DTYPE:
        raise ContainerError(f"raw tensors must be float32 or float64, got {arr.dtype}")
    pbyte = arr.dtype.itemsize
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", pbyte, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_PREC_TO_DTYPE[pbyte], copy=False).tobytes(order="C"))


def load_raw_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(10)
        if len(header) != 10 or header[:8] != TENSOR_MAGIC:
            raise ContainerError("not a raw tensor file (bad magic)")
        pbyte, ndim = struct.unpack("<BB", header[8:])
        if pbyte not in _PREC_TO_DTYPE:
            raise ContainerError(f"unsupported precision byte {pbyte}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = fh.read(count * pbyte)
        if len(raw) != count * pbyte:
            raise ContainerError("truncated raw tensor data")
        return np.frombuffer(raw, dtype=_PREC_TO_DTYPE[pbyte]).reshape(shape).copy()
