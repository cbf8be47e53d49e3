"""Binary checkpoint container (``MLSPCKP1``).

Layout, all little-endian: 8-byte magic, u16 version, u32 record count, then
per record ``u16 name length, name (utf-8), u8 rank, u32 dims..., float32
payload``.  Parameters are stored as ``param:<layer>/<key>``, buffers as
``state:<layer>/<key>`` and optimizer state as ``adam.m:<name>``,
``adam.v:<name>`` and the rank-0 ``adam.t``.
"""
import struct

import numpy as np

from .optim import AdamState

MAGIC = b"MLSPCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(path, records):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(records)))
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_records(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    version, count = struct.unpack_from("<HI", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 14
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(data, "<f4", size, pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    return out


def save_checkpoint(path, weights, adam=None):
    """Write a weight snapshot (``ModelGraph.get_weights()``) and optional
    optimizer state."""
    params = {k: v for k, v in weights.items()}
    records = {}
    for key, arr in params.items():
        prefix = "state:" if key.endswith(("/running_mean", "/running_var")) else "param:"
        records[prefix + key] = arr
    if adam is not None:
        records["adam.t"] = np.array(adam.t, dtype=np.float32)
        records["adam.hyper"] = np.array([adam.beta1, adam.beta2, adam.epsilon], np.float32)
        for key in adam.m:
            records["adam.m:" + key] = adam.m[key]
            records["adam.v:" + key] = adam.v[key]
    write_records(path, records)


def load_checkpoint(path):
    """Return ``(weights, adam_state_or_None)``."""
    records = read_records(path)
    weights = {}
    adam = None
    for name, arr in records.items():
        if name.startswith(("param:", "state:")):
            weights[name.split(":", 1)[1]] = arr
    if "adam.t" in records:
        b1, b2, eps = (float(v) for v in records.get("adam.hyper", [0.9, 0.999, 1e-7]))
        step = int(np.asarray(records["adam.t"]).reshape(-1)[0])
        adam = AdamState(beta1=b1, beta2=b2, epsilon=eps, t=step)
        for name, arr in records.items():
            if name.startswith("adam.m:"):
                key = name[len("adam.m:"):]
                adam.m[key] = arr
                adam.v[key] = records["adam.v:" + key]
    return weights, adam
