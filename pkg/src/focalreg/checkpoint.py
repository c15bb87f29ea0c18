"""Named-parameter checkpoints.

Binary layout (little-endian): magic "FENP", version u32, count u32, then per
tensor: name length u32 + UTF-8 name, rank u32, dims u32[rank], data f32[].
Round-trips are bit-exact.
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"FENP"
VERSION = 1


class CheckpointError(IOError):
    """Bad magic, version, or truncated checkpoint."""


def save_params(path, params):
    """params: dict name -> Tensor (written in sorted-name order)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_params(path, requires_grad=True):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
            off += 4 * size
            params[name] = Tensor(data.reshape(dims).copy(),
                                  requires_grad=requires_grad)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return params
