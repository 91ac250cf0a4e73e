"""Binary checkpoints: little-endian, magic "MSIA", version 1.

Layout: magic (4 bytes), u32 version, u64 step, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims, u8 dtype tag
(0 = f64, 1 = f32), raw values. A u32-length-prefixed UTF-8 block of
key=value config lines closes the file.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import init_params
from .objectives import NegativeQueue
from .tensor import Tensor
from .train import TrainState, config_from_text, config_to_text, model_config_for

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MSIA"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


def _named_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.pair.online.items():
        tensors[f"online.{name}"] = p.data
    for name, p in state.pair.target.items():
        tensors[f"target.{name}"] = p.data
    for name, buf in state.opt_buffers.items():
        tensors[f"opt.{name}"] = buf
    if state.queue is not None:
        tensors["queue.buffer"] = state.queue.buffer
        tensors["queue.state"] = np.array([state.queue.size, state.queue.cursor],
                                          dtype=np.float64)
    return dict(sorted(tensors.items()))


def save_checkpoint(state: TrainState, path) -> None:
    with open(path, "wb") as fh:
        tensors = _named_tensors(state)
        fh.write(MAGIC)
        fh.write(struct.pack("<IQI", VERSION, state.step, len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", 0))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        config_blob = config_to_text(state.config).encode("utf-8")
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated (needed {n} more bytes)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> TrainState:
    """Rebuild a full training state; raises CheckpointError on any damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, step, count = r.unpack("<IQI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        (tag,) = r.unpack("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(n * (8 if tag == 0 else 4))
        arr = np.frombuffer(raw, dtype=_DTYPES[tag]).astype(np.float64).reshape(dims)
        tensors[name] = arr.copy()

    (cfg_len,) = r.unpack("<I")
    cfg = config_from_text(r.take(cfg_len).decode("utf-8"))
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes")

    mcfg = model_config_for(cfg)
    expected = set(init_params(mcfg, np.random.default_rng(0)).keys())
    online = {name[len("online."):]: Tensor(arr, requires_grad=True)
              for name, arr in tensors.items() if name.startswith("online.")}
    target = {name[len("target."):]: Tensor(arr)
              for name, arr in tensors.items() if name.startswith("target.")}
    if set(online) != expected or set(target) != expected:
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name in expected:
        if online[name].shape != target[name].shape:
            raise CheckpointError(f"{path}: online/target shape mismatch for {name}")

    buffers = {name[len("opt."):]: arr for name, arr in tensors.items()
               if name.startswith("opt.")}

    queue = None
    if cfg.loss_mode == "moco":
        if "queue.buffer" not in tensors or "queue.state" not in tensors:
            raise CheckpointError(f"{path}: missing queue state for loss_mode=moco")
        queue = NegativeQueue(cfg.queue_length, mcfg.proj2d_out)
        if tensors["queue.buffer"].shape != queue.buffer.shape:
            raise CheckpointError(f"{path}: queue shape mismatch")
        queue.buffer[:] = tensors["queue.buffer"]
        queue.size = int(tensors["queue.state"][0])
        queue.cursor = int(tensors["queue.state"][1])

    from .model import SiamesePair  # local import to keep module load light

    return TrainState(config=cfg, model_config=mcfg,
                      pair=SiamesePair(online=online, target=target),
                      opt_buffers=buffers, queue=queue, step=int(step))
