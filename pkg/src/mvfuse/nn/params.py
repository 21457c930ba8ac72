"""Named parameters, deterministic initialisation and the FBCK checkpoint file."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..io import FormatError, Reader, fnv1a64, pack_array, seal, unpack_array, unseal
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FBCK"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True

    def tensor(self) -> Tensor:
        """Leaf tensor view used inside a forward pass."""
        return Tensor(self.value, requires_grad=self.trainable, param=self)

    @property
    def shape(self):
        return self.value.shape


def uniform_init(fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def zeros_init(rng, shape):
    return np.zeros(shape)


def ones_init(rng, shape):
    return np.ones(shape)


def normal_init(std: float):
    return lambda rng, shape: rng.normal(0.0, std, size=shape)


@dataclass
class ParamStore:
    """Insertion-ordered collection of named parameters.

    Each parameter draws its initial value from its own stream seeded by
    ``(rng_seed, crc32(name))``, so values do not depend on the order in
    which modules are constructed.
    """

    rng_seed: int = 0
    dtype: type = np.float32
    params: dict = field(default_factory=dict)

    def add(self, name: str, shape, init) -> ParamTensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        rng = np.random.default_rng([self.rng_seed, zlib.crc32(name.encode())])
        value = np.asarray(init(rng, tuple(shape)), dtype=np.float64).astype(self.dtype)
        p = ParamTensor(name, value)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def values(self):
        return self.params.values()

    def items(self):
        return self.params.items()

    def select(self, prefix: str = ""):
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for p in self.select(prefix):
            p.trainable = flag

    def checksum(self, prefix: str = "") -> int:
        """FNV-1a over names, shapes and raw bytes of the selected values."""
        chunks = []
        for p in self.select(prefix):
            chunks.append(p.name.encode())
            chunks.append(pack_array(p.value))
        return fnv1a64(b"".join(chunks))

    def state(self) -> dict:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state(self, state: dict, strict: bool = True) -> None:
        missing = [n for n in self.params if n not in state]
        extra = [n for n in state if n not in self.params]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in self.params:
                continue
            p = self.params[name]
            if p.value.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.value.shape} vs {arr.shape}")
            p.value = np.array(arr, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        """Copy with every value cast to ``dtype``; trainable flags kept."""
        out = ParamStore(self.rng_seed, dtype)
        for name, p in self.params.items():
            out.params[name] = ParamTensor(name, p.value.astype(dtype), None, p.trainable)
        return out


def encode_checkpoint(state: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(pack_array(np.asarray(arr)))
    return seal(b"".join(parts))


def decode_checkpoint(blob: bytes) -> dict:
    reader = Reader(unseal(blob, CHECKPOINT_MAGIC), len(CHECKPOINT_MAGIC))
    version, count = reader.unpack("<IQ")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (n,) = reader.unpack("<I")
        try:
            name = reader.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8") from exc
        if name in state:
            raise FormatError(f"duplicate parameter {name!r}")
        state[name] = unpack_array(reader)
    if not reader.at_end():
        raise FormatError("trailing bytes in checkpoint")
    return state


def save_checkpoint(path, state: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())
