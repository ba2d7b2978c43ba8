"""Binary container format shared by model / gate / shard files.

Layout: 4-byte magic, u32 LE version, u32 LE header length, UTF-8 JSON
header, then raw little-endian f32 tensor data in header-declared order.
"""

import json
import os
import struct

import numpy as np

MAGIC_MODEL = b"FKVM"
MAGIC_GATES = b"FKVZ"
MAGIC_SHARD = b"FKVT"

VERSION = 1


class ContainerError(Exception):
    """Malformed or mismatched container file."""


def write_container(path, magic, header, tensors, version=VERSION):
    """Write a container atomically (tmp file + rename).

    tensors is an ordered list of (name, array); arrays are stored as f32 LE.
    The header is augmented with the tensor manifest.
    """
    header = dict(header)
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in tensors
    ]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", version))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_container(path, magic, version=VERSION):
    """Read a container; returns (header, {name: f32 array})."""
    with open(path, "rb") as f:
        got_magic = f.read(4)
        if got_magic != magic:
            raise ContainerError(
                f"{path}: bad magic {got_magic!r}, expected {magic.decode()!r}"
            )
        (got_version,) = struct.unpack("<I", f.read(4))
        if got_version != version:
            raise ContainerError(
                f"{path}: unsupported version {got_version}, expected {version}"
            )
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ContainerError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape)
        trailing = f.read(1)
        if trailing:
            raise ContainerError(f"{path}: trailing bytes after declared tensors")
    return header, tensors
