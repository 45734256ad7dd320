"""Named parameter collections, the Adam optimizer and checkpoint I/O.

Checkpoints use a little-endian container: magic ``SPFG``, a u32 format
version, then per entry a u32 name length, the UTF-8 name, u32 rank, u32
extents and a float32 payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"SPFG"
FORMAT_VERSION = 1


class ParamSet:
    """Ordered map of name -> Tensor with an update counter."""

    def __init__(self):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.version = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self.entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.entries.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        out.version = self.version
        return out

    def load_values(self, other: "ParamSet") -> None:
        """Copy values in from another set with identical names/shapes."""
        if other.names() != self.names():
            raise ValueError("parameter name mismatch between sets")
        for name, t in other.entries.items():
            mine = self.entries[name]
            if mine.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {mine.shape} vs {t.shape}")
            mine.data = t.data.copy()
        self.version = other.version

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self.entries.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=True))
        out.version = self.version
        return out


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype))


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def adam_step(
    params: ParamSet,
    grads: dict,
    state: dict,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction.

    ``state`` persists first/second moments and the step count between calls.
    Raises on non-finite gradients without touching the parameters.
    """
    for name in params.names():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.setdefault("m:" + name, np.zeros_like(p.data))
        v = state.setdefault("v:" + name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    params.version += 1


class Adam:
    """Convenience wrapper binding hyperparameters and state to a ParamSet."""

    def __init__(self, params: ParamSet, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, grads: dict | None = None) -> None:
        if grads is None:
            grads = {
                name: t.grad
                for name, t in self.params
                if t.grad is not None
            }
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


def save_paramset(params: ParamSet, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, t in params:
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_paramset(path) -> ParamSet:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    out = ParamSet()
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need = count * 4
        if off + need > len(blob):
            raise ValueError(f"truncated checkpoint payload for {name}")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += need
        out.add(name, Tensor(data.copy(), requires_grad=True))
    return out
