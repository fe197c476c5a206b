"""Flat binary checkpoint format.

Little-endian layout::

    magic      4 bytes  b"FRCK"
    version    uint32   (1)
    seed       int64
    iteration  int64
    n_nets     uint32
    per net:
        name_len uint32, name utf-8
        head     uint8   (0 identity, 1 box)
        n_sizes  uint32, sizes uint32[n_sizes]
        in_shift float64[in], in_scale float64[in]
        if box:  lower float64[out], upper float64[out]
        for each layer: weight float64[out*in] (row-major), bias float64[out]
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import DTYPE, Mlp

MAGIC = b"FRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    seed: int
    nets: dict = field(default_factory=dict)  # name -> Mlp

    @property
    def policy(self):
        return self.nets["policy"]

    @property
    def value(self):
        return self.nets["value"]

    @property
    def field(self):
        return self.nets.get("field")


def _net_bytes(name, net: Mlp):
    out = io.BytesIO()
    nb = name.encode()
    out.write(struct.pack("<I", len(nb)))
    out.write(nb)
    out.write(struct.pack("<B", 1 if net.head == "box" else 0))
    out.write(struct.pack("<I", len(net.sizes)))
    out.write(np.asarray(net.sizes, dtype="<u4").tobytes())
    out.write(np.asarray(net.in_shift.numpy(), dtype="<f8").tobytes())
    out.write(np.asarray(net.in_scale.numpy(), dtype="<f8").tobytes())
    if net.head == "box":
        lo = (net.box_mid - net.box_half).numpy()
        hi = (net.box_mid + net.box_half).numpy()
        out.write(np.asarray(lo, dtype="<f8").tobytes())
        out.write(np.asarray(hi, dtype="<f8").tobytes())
    for layer in net.layers:
        out.write(np.ascontiguousarray(layer.weight.detach().numpy(), dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(layer.bias.detach().numpy(), dtype="<f8").tobytes())
    return out.getvalue()


def to_bytes(ck: Checkpoint):
    parts = [MAGIC, struct.pack("<IqqI", VERSION, ck.seed, ck.iteration, len(ck.nets))]
    for name in sorted(ck.nets):
        parts.append(_net_bytes(name, ck.nets[name]))
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def from_bytes(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, seed, iteration, n_nets = r.unpack("<IqqI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    nets = {}
    for _ in range(n_nets):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        (head,) = r.unpack("<B")
        (ns,) = r.unpack("<I")
        sizes = tuple(int(s) for s in np.frombuffer(r.take(4 * ns), dtype="<u4"))
        shift, scale = r.floats(sizes[0]), r.floats(sizes[0])
        lo = hi = None
        if head == 1:
            lo, hi = r.floats(sizes[-1]), r.floats(sizes[-1])
        net = Mlp(sizes, head="box" if head == 1 else "identity", lower=lo, upper=hi,
                  in_shift=shift, in_scale=scale)
        with torch.no_grad():
            for layer, (a, b) in zip(net.layers, zip(sizes[:-1], sizes[1:])):
                layer.weight.copy_(torch.as_tensor(r.floats(a * b).reshape(b, a), dtype=DTYPE))
                layer.bias.copy_(torch.as_tensor(r.floats(b), dtype=DTYPE))
        nets[name] = net
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(int(iteration), int(seed), nets)


def save(path, ck: Checkpoint):
    from ..csvio import atomic_write_bytes

    atomic_write_bytes(path, to_bytes(ck))


def load(path):
    return from_bytes(Path(path).read_bytes())
