"""Checkpoint files: network config, named parameters and optional Adam state.

Layout (little endian)::

    b"DGMW" | u32 version | u32 header length | JSON header | tensor payload

The JSON header carries the network config, the iteration count, the
optimiser hyper-parameters and an ordered tensor directory
``[name, dtype, shape]``. The payload is the raw bytes of those tensors in
directory order, so a load followed by a save reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dogm.errors import ConfigError, DataError
from dogm.nn.network import NetConfig, Network, _param_shapes
from dogm.nn.training import Adam

MAGIC = b"DGMW"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_ADAM_FIELDS = ("lr", "beta1", "beta2", "eps", "decay_every", "decay_factor", "clip_norm")


@dataclass
class Checkpoint:
    network: Network
    optimizer: Adam | None = None

    @property
    def iteration(self) -> int:
        return self.optimizer.iteration if self.optimizer is not None else 0


def checkpoint_bytes(net: Network, optimizer: Adam | None = None) -> bytes:
    tensors = [(name, arr) for name, arr in sorted(net.params.items())]
    if optimizer is not None:
        for name, _ in list(tensors):
            if name in optimizer.m:
                tensors.append((f"adam.m/{name}", optimizer.m[name]))
                tensors.append((f"adam.v/{name}", optimizer.v[name]))
    header = {
        "config": net.config.to_dict(),
        "iteration": optimizer.iteration if optimizer is not None else 0,
        "optimizer": ({k: getattr(optimizer, k) for k in _ADAM_FIELDS}
                      if optimizer is not None else None),
        "tensors": [[name, arr.dtype.str, list(arr.shape)] for name, arr in tensors],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, len(hb)), hb]
    parts += [np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
              for _, arr in tensors]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise DataError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise DataError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    off = _PREFIX.size + hlen
    tensors = {}
    for name, dt, shape in header["tensors"]:
        dtype = np.dtype(dt)
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if off + n > len(buf):
            raise DataError(f"checkpoint truncated in tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype=dtype, count=n // dtype.itemsize,
                                      offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += n
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes in checkpoint")

    config = NetConfig.from_dict(header["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    extra = set(params) - set(_param_shapes(config))
    if extra:
        raise ConfigError(f"checkpoint has parameters its config does not: {sorted(extra)}")
    net = Network(config, params)
    opt = None
    if header.get("optimizer") is not None:
        opt = Adam(**header["optimizer"], iteration=int(header["iteration"]))
        for k, v in tensors.items():
            if k.startswith("adam.m/"):
                opt.m[k[7:]] = v
            elif k.startswith("adam.v/"):
                opt.v[k[7:]] = v
    return Checkpoint(net, opt)


def save_checkpoint(path, net: Network, optimizer: Adam | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net, optimizer))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(buf)
