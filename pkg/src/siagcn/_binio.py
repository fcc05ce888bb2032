"""Little-endian primitives shared by the heatmap and model file formats."""

import json
import struct

import numpy as np

from .errors import ParseError

F8 = np.dtype("<f8")


def read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ParseError(f"file truncated while reading {what} ({len(data)} of {n} bytes)")
    return data


def write_u32(f, value):
    f.write(struct.pack("<I", value))


def read_u32(f, what):
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def write_json(f, obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    write_u32(f, len(blob))
    f.write(blob)


def read_json(f, what):
    n = read_u32(f, what)
    try:
        return json.loads(read_exact(f, n, what).decode("utf-8"))
    except ValueError as exc:
        raise ParseError(f"malformed {what}: {exc}") from None


def write_tensor(f, arr):
    arr = np.ascontiguousarray(arr, dtype=F8)
    write_u32(f, arr.ndim)
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f, what="tensor"):
    ndim = read_u32(f, what)
    if ndim > 8:
        raise ParseError(f"implausible rank {ndim} for {what}")
    shape = struct.unpack(f"<{ndim}Q", read_exact(f, 8 * ndim, what))
    count = int(np.prod(shape, dtype=np.int64))
    data = read_exact(f, 8 * count, what)
    return np.frombuffer(data, dtype=F8).astype(np.float64).reshape(shape)


def write_tensors(f, arrays):
    write_u32(f, len(arrays))
    for a in arrays:
        write_tensor(f, a)


def read_tensors(f, what="tensors"):
    return [read_tensor(f, what) for _ in range(read_u32(f, what))]
