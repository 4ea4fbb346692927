"""ARCC binary tensor container used for checkpoints and emission lattices.

Layout (all integers u32 little-endian)::

    b"ARCC" | version | { name_len | name (UTF-8) | rank | dims[rank] | float64-LE payload }*
"""

from dataclasses import dataclass
import struct

import numpy as np

from .data import atomic_write
from .errors import FormatError, ValidationError

MAGIC = b"ARCC"
VERSION = 1
_U32 = struct.Struct("<I")


def dumps(tensors):
    parts = [MAGIC, _U32.pack(VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf):
    """Parse a container; raises FormatError with the failing byte offset."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected ARCC", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    version = _U32.unpack_from(buf, 4)[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 8
    tensors = {}

    def take(size, what):
        nonlocal pos
        if pos + size > len(buf):
            raise FormatError(f"truncated {what}", pos)
        start = pos
        pos += size
        return buf[start:pos]

    while pos < len(buf):
        record = pos
        (name_len,) = _U32.unpack(take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", record + 4) from None
        (rank,) = _U32.unpack(take(4, "rank"))
        dims = tuple(_U32.unpack(take(4, "dimension"))[0] for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * count, f"payload of '{name}'")
        if name in tensors:
            raise FormatError(f"duplicate tensor '{name}'", record)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return tensors


def save(path, tensors):
    atomic_write(path, dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


@dataclass
class EmissionLattice:
    """T x V next-token log-probabilities, one row per output position."""

    logp: np.ndarray

    def __post_init__(self):
        self.logp = np.asarray(self.logp, dtype=float)
        if self.logp.ndim != 2:
            raise ValidationError("lattice must be a T x V matrix")
        if np.any(np.isnan(self.logp)) or np.any(self.logp == np.inf):
            raise ValidationError("lattice entries must be finite or -inf")
        if self.logp.size:
            mass = np.exp(self.logp).sum(axis=1)
            if np.max(np.abs(mass - 1.0)) > 1e-6:
                raise ValidationError("lattice rows must be normalized")


def write_lattice(path, lattice):
    save(path, {"lattice": lattice.logp})


def read_lattice(path):
    tensors = load(path)
    if set(tensors) != {"lattice"} or tensors["lattice"].ndim != 2:
        raise FormatError("container does not hold a single 2-D 'lattice' tensor", 8)
    return EmissionLattice(tensors["lattice"])
