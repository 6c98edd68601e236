"""Named float64 parameter collections and their on-disk format.

A checkpoint file is a flat sequence of named arrays:

    magic   4 bytes   b"RLD2"
    version u32 LE
    count   u32 LE
    entry*  name_len u32 LE, name UTF-8, rank u32 LE,
            dims (rank x u64 LE), values (prod(dims) x f64 LE)

Entries preserve insertion order; writing the same mapping twice yields
byte-identical files.  Rank-0 entries carry exactly one value.
"""

from __future__ import annotations

import struct
from typing import Collection, Iterator, Mapping

import numpy as np

from .autodiff import Tensor

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "ParamStore",
    "init_params",
    "read_arrays",
    "write_arrays",
]

CHECKPOINT_MAGIC = b"RLD2"
CHECKPOINT_VERSION = 1


def write_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Serialize named float64 arrays to ``path`` in checkpoint format."""
    chunks: list[bytes] = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(arrays)),
    ]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_arrays(path) -> dict[str, np.ndarray]:
    """Load a checkpoint written by :func:`write_arrays`."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {buf[:4]!r})")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = np.frombuffer(buf, dtype="<u8", count=rank, offset=off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
        off += 8 * size
        out[name] = values.reshape(tuple(int(d) for d in dims)).copy()
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


class ParamStore:
    """Ordered mapping of parameter names to float64 arrays plus gradients."""

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def n_scalars(self) -> int:
        return sum(v.size for v in self._values.values())

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self._values.items():
            other.add(name, v)
        return other

    def load_values(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place; names and shapes must match exactly."""
        if set(arrays) != set(self._values):
            missing = set(self._values) - set(arrays)
            extra = set(arrays) - set(self._values)
            raise ValueError(f"name mismatch: missing={missing}, extra={extra}")
        for name, arr in arrays.items():
            if np.shape(arr) != self._values[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"{np.shape(arr)} vs {self._values[name].shape}"
                )
            self._values[name][...] = arr

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._values)

    def save(self, path) -> None:
        write_arrays(path, self._values)

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        for name, arr in read_arrays(path).items():
            store.add(name, arr)
        return store

    # -- graph integration -------------------------------------------------

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh graph leaves wrapping the current values."""
        return {
            name: Tensor(v, requires_grad=requires_grad)
            for name, v in self._values.items()
        }

    def accumulate(self, leaves: Mapping[str, Tensor]) -> None:
        """Add leaf gradients (post-backward) into the stored gradients."""
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self._grads[name] += leaf.grad

    def grad_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)


def init_params(
    shapes: Mapping[str, tuple[int, ...]],
    rng: np.random.Generator,
    zero: Collection[str] = (),
) -> ParamStore:
    """Build a store from a shape map.

    Matrices (ndim >= 2) get scaled-uniform fan-in init
    ``U(-1/sqrt(d_in), 1/sqrt(d_in))`` with ``d_in = shape[-2]``; vectors and
    scalars start at zero, as does every name listed in ``zero`` (used for
    conditioning heads so modulation starts as identity).  An empty shape
    map yields an empty store.
    """
    store = ParamStore()
    for name, shape in shapes.items():
        if name in zero or len(shape) < 2:
            store.add(name, np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(shape[-2])
            store.add(name, rng.uniform(-bound, bound, size=shape))
    return store
