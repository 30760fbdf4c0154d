"""Seeded weight initialisation and the ``.lkcw`` weight-file format.

Layout (all integers little-endian)::

    magic        4 bytes   b"LKCW"
    version      uint32    1
    header_len   uint32
    header       header_len bytes of UTF-8 JSON:
                 {"variant": str, "fused": bool, "config": {...NetworkConfig...}}
    count        uint32    number of tensors
    directory    count entries of
                   name_len uint16, name (UTF-8),
                   dtype    uint8   (1 = float32),
                   ndim     uint8,  dims uint32 * ndim,
                   offset   uint64  (bytes from payload start),
                   nbytes   uint64
    payload      tensors as little-endian float32, C order, in directory order

Tensors appear in the canonical order of :func:`lkcell.network.parameter_specs`.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigMismatchError, FormatVersionError, TruncatedFileError
from .network import (Network, NetworkConfig, assemble_network, build_network, get_config,
                      parameter_specs)

MAGIC = b"LKCW"
VERSION = 1
DTYPE_FLOAT32 = 1


def seeded_init(config, seed=0, fused=False):
    """Name -> array for every tensor of ``config`` (see :mod:`lkcell.rng` for the generator)."""
    return build_network(config, seed, fused=fused).state_dict()


def encode(net: Network) -> bytes:
    header = json.dumps({"variant": net.config.variant, "fused": net.fused, "config": net.config.to_dict()},
                        sort_keys=True).encode("utf-8")
    directory = bytearray()
    payload = bytearray()
    params = list(net.named_parameters())
    for name, arr in params:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        raw = name.encode("utf-8")
        directory += struct.pack("<H", len(raw)) + raw
        directory += struct.pack("<BB", DTYPE_FLOAT32, arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<QQ", len(payload), len(data))
        payload += data
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<I", len(params)), bytes(directory), bytes(payload)])


def save(net: Network, path):
    """Write ``net`` to ``path`` atomically (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    data = encode(net)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends inside {what} (needs {self.pos + n} bytes, has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes):
    """Parse a weight file into (header dict, {name: float32 array}) without building a network."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatVersionError(f"not an LKCW weight file (magic {magic!r})")
    version, header_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatVersionError(f"unsupported weight-file version {version} (expected {VERSION})")
    header = json.loads(r.take(header_len, "header").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "directory")
        name = r.take(name_len, "directory").decode("utf-8")
        dtype, ndim = r.unpack("<BB", "directory")
        if dtype != DTYPE_FLOAT32:
            raise FormatVersionError(f"tensor {name} has unsupported dtype code {dtype}")
        dims = r.unpack(f"<{ndim}I", "directory")
        offset, nbytes = r.unpack("<QQ", "directory")
        if nbytes != 4 * int(np.prod(dims, dtype=np.int64)):
            raise ConfigMismatchError(f"tensor {name}: byte count {nbytes} does not match dims {dims}")
        entries.append((name, dims, offset, nbytes))
    base = r.pos
    tensors = {}
    end = 0
    for name, dims, offset, nbytes in sorted(entries, key=lambda e: e[2]):
        if offset < end:
            raise ConfigMismatchError(f"tensor {name} overlaps the previous tensor in the payload")
        end = offset + nbytes
        if base + end > len(data):
            raise TruncatedFileError(f"payload of tensor {name} extends past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=base + offset)
        tensors[name] = arr.reshape(dims).astype(np.float32)
    if len(tensors) != len(entries):
        raise ConfigMismatchError("weight file lists a tensor name more than once")
    tensors = {name: tensors[name] for name, *_ in entries}
    return header, tensors


def load(path, config=None) -> Network:
    """Load a network; ``config`` (name or NetworkConfig) must match the file's graph.

    Every tensor is checked against the graph the config builds, in canonical
    order, and the first one that is missing or mis-shaped is named in the
    error. No network is returned unless all checks pass.
    """
    with open(path, "rb") as f:
        data = f.read()
    header, tensors = decode(data)
    if config is None:
        config = NetworkConfig.from_dict(header["config"])
    elif isinstance(config, str):
        config = get_config(config)
    fused = bool(header.get("fused", False))

    expected = parameter_specs(config, fused)
    for name, shape, _, _ in expected:
        if name not in tensors:
            raise ConfigMismatchError(f"tensor {name} required by config {config.variant!r} is missing from the file")
        if tensors[name].shape != tuple(shape):
            raise ConfigMismatchError(f"tensor {name} has shape {tensors[name].shape} in the file, "
                                      f"config {config.variant!r} expects {tuple(shape)}")
    extra = set(tensors) - {s[0] for s in expected}
    if extra:
        raise ConfigMismatchError(f"file holds tensors unknown to config {config.variant!r}: {sorted(extra)[0]}")
    return assemble_network(config, lambda name, shape, kind, fan: tensors[name], fused)
