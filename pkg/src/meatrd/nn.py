"""Parameter containers, layer helpers, the Adam optimizer and MPRM checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MPRM_MAGIC = b"MPRM"
MPRM_VERSION = 1


class CheckpointError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Named bag of trainable tensors with forward methods defined by subclasses."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def dense(self, rng, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self.add(f"{name}.w", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def conv(self, rng, name: str, c_in: int, c_out: int, k: int, transposed: bool = False) -> None:
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        self.add(f"{name}.w", glorot_uniform(rng, shape, c_in * k * k, c_out * k * k))
        self.add(f"{name}.b", np.zeros(c_out))

    def linear(self, x: Tensor, name: str) -> Tensor:
        out = ad.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return out if b is None else out + b

    def conv2d(self, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, padding)

    def deconv2d(self, x: Tensor, name: str, stride: int = 2, padding: int = 1) -> Tensor:
        return ad.conv_transpose2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, padding)

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith(prefix)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))


class Adam:
    """Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# MPRM checkpoint: magic, u16 version, u32 count, then per array
# u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, float32 data.
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict[str, np.ndarray] | None = None) -> None:
    arrays = dict(state)
    if meta:
        arrays.update({f"__meta__.{k}": np.asarray(v) for k, v in meta.items()})
    buf = bytearray(MPRM_MAGIC)
    buf += struct.pack("<HI", MPRM_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MPRM_MAGIC:
        raise CheckpointError(f"{path}: not an MPRM checkpoint")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != MPRM_VERSION:
        raise CheckpointError(f"{path}: unsupported MPRM version {version}")
    off = 10
    state, meta = {}, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 4 * n
            if name.startswith("__meta__."):
                meta[name[len("__meta__."):]] = arr
            else:
                state[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return state, meta
