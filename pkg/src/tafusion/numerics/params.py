"""Named parameter containers and their flat binary file format.

File layout (all little-endian)::

    b"TFPS"  u32 version  i64 seed  u32 count
    count x (u16 name_len, utf-8 name, u8 ndim, ndim x u32 extent)
    count x row-major f64 payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, MigrationError, ParseError
from .tensor import Tensor

MAGIC = b"TFPS"
VERSION = 1


class ParameterSet:
    """Ordered name -> Tensor map plus the seed its values were drawn from."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, t in self._params.items():
            t.data = snap[k].copy()

    def update_from(self, other: "ParameterSet", prefix: str = ""):
        """Copy values of ``other`` into parameters named ``prefix + name``."""
        for k, t in other.items():
            mine = self._params[prefix + k]
            if mine.shape != t.shape:
                raise ContractError(f"shape mismatch for {prefix + k}: {mine.shape} vs {t.shape}")
            mine.data = t.data.copy()

    def subset(self, prefix: str) -> "ParameterSet":
        """New set holding the parameters under ``prefix`` (names stripped, tensors shared)."""
        out = ParameterSet(self.seed)
        for k, t in self._params.items():
            if k.startswith(prefix):
                out._params[k[len(prefix):]] = t
        return out

    @classmethod
    def join(cls, parts: dict[str, "ParameterSet"], seed: int = 0) -> "ParameterSet":
        """One set viewing several, names prefixed; tensors are shared, not copied."""
        out = cls(seed)
        for prefix, ps in parts.items():
            for k, t in ps.items():
                if prefix + k in out._params:
                    raise ContractError(f"duplicate parameter name {prefix + k!r}")
                out._params[prefix + k] = t
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Iq I", VERSION, self.seed, len(self._params)))
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for t in self._params.values():
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise ParseError("not a parameter file (bad magic)")
        try:
            version, seed, count = struct.unpack_from("<Iq I", view, 4)
            if version != VERSION:
                raise MigrationError(f"parameter file version {version}, expected {VERSION}")
            pos = 4 + struct.calcsize("<Iq I")
            header = []
            for _ in range(count):
                (n,) = struct.unpack_from("<H", view, pos)
                pos += 2
                name = bytes(view[pos:pos + n]).decode("utf-8")
                pos += n
                (nd,) = struct.unpack_from("<B", view, pos)
                pos += 1
                shape = struct.unpack_from(f"<{nd}I", view, pos)
                pos += 4 * nd
                header.append((name, shape))
            out = cls(seed)
            for name, shape in header:
                n = int(np.prod(shape)) if shape else 1
                end = pos + 8 * n
                if end > len(view):
                    raise ParseError(f"truncated payload for parameter {name!r}")
                arr = np.frombuffer(view[pos:end], dtype="<f8").reshape(shape)
                out.add(name, arr)
                pos = end
        except struct.error as exc:
            raise ParseError(f"truncated parameter header: {exc}") from exc
        if pos != len(view):
            raise ParseError(f"{len(view) - pos} trailing bytes after payload")
        return out

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterSet":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------- initializers


def fan_in_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_linear(ps: ParameterSet, name: str, d_in: int, d_out: int, bias: bool = True):
    ps.add(f"{name}.W", fan_in_uniform(ps.rng, (d_in, d_out), d_in))
    if bias:
        ps.add(f"{name}.b", np.zeros(d_out))


def init_embedding(ps: ParameterSet, name: str, n: int, d: int, mean: float = 0.0,
                   std: float = 0.02):
    ps.add(name, mean + std * ps.rng.standard_normal((n, d)))


def init_conv(ps: ParameterSet, name: str, c_in: int, c_out: int, k: int):
    ps.add(f"{name}.W", fan_in_uniform(ps.rng, (c_out, c_in, k), c_in * k))
    ps.add(f"{name}.b", np.zeros(c_out))


def init_residual_block(ps: ParameterSet, name: str, c_in: int, c_out: int, k: int):
    init_conv(ps, f"{name}.conv1", c_in, c_out, k)
    init_conv(ps, f"{name}.conv2", c_out, c_out, k)
    if c_in != c_out:
        init_conv(ps, f"{name}.proj", c_in, c_out, 1)


def init_lstm(ps: ParameterSet, name: str, d_in: int, hidden: int):
    ps.add(f"{name}.Wx", fan_in_uniform(ps.rng, (d_in, 4 * hidden), d_in))
    ps.add(f"{name}.Wh", fan_in_uniform(ps.rng, (hidden, 4 * hidden), hidden))
    ps.add(f"{name}.b", np.zeros(4 * hidden))


def init_bilstm(ps: ParameterSet, name: str, d_in: int, hidden: int):
    init_lstm(ps, f"{name}.fw", d_in, hidden)
    init_lstm(ps, f"{name}.bw", d_in, hidden)


def init_gru(ps: ParameterSet, name: str, d_in: int, hidden: int):
    ps.add(f"{name}.Wx", fan_in_uniform(ps.rng, (d_in, 3 * hidden), d_in))
    ps.add(f"{name}.Wh", fan_in_uniform(ps.rng, (hidden, 3 * hidden), hidden))
    ps.add(f"{name}.bx", np.zeros(3 * hidden))
    ps.add(f"{name}.bh", np.zeros(3 * hidden))


def init_mlp(ps: ParameterSet, name: str, widths: list[int]):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        init_linear(ps, f"{name}.{i}", a, b)
