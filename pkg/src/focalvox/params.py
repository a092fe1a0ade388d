"""Named parameter storage.

Parameters live in an ordered map from dotted names ("stage4.sfm0.h.weight")
to leaf tensors.  Batch-norm running statistics are kept in the same map so
they persist with the weights, but they are flagged as buffers: they are
not counted as trainable parameters and receive no gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .tape import Tensor

_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer_name(name: str) -> bool:
    return name.endswith(_BUFFER_SUFFIXES)


class ParamStore:
    """Ordered map from dotted name to a parameter tensor."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        t = Tensor(arr)
        self._entries[name] = t
        return t

    def tensor(self, name: str) -> Tensor:
        return self._entries[name]

    def data(self, name: str) -> np.ndarray:
        return self._entries[name].data

    def set_data(self, name: str, value: np.ndarray) -> None:
        """Replace the payload of an entry in place (same shape required).

        Used by weight loading and by batch-norm running-stat updates; the
        tensor identity (uid) is preserved.
        """
        t = self._entries[name]
        arr = np.asarray(value, dtype=t.data.dtype)
        if arr.shape != t.data.shape:
            raise ShapeMismatch(
                f"{name}: cannot assign shape {arr.shape} to {t.data.shape}"
            )
        t.data = arr

    def items(self):
        return self._entries.items()

    def param_names(self) -> list[str]:
        """Trainable entries only (buffers excluded)."""
        return [n for n in self._entries if not is_buffer_name(n)]

    def scalar_count(self) -> int:
        """Total number of trainable scalars."""
        return sum(self._entries[n].data.size for n in self.param_names())

    def as_dtype(self, dtype) -> "ParamStore":
        """A parallel store with every payload cast to ``dtype``.

        Gradient checking runs models in float64 through this view; tensor
        identities are fresh, so gradients key against the view's tensors.
        """
        view = ParamStore()
        for name, t in self._entries.items():
            view.add(name, t.data.astype(dtype))
        return view


class Initializer:
    """Deterministic parameter creation.

    Weights draw from a centered uniform distribution with bound
    ``1/sqrt(fan_in)``; biases and norm shifts start at zero, norm gains at
    one.  A single seeded generator is consumed in insertion order, so a
    given config and seed always produce identical parameters.
    """

    def __init__(self, store: ParamStore, seed: int, dtype=np.float32):
        self.store = store
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self.store.add(name, data)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.store.add(name, np.zeros(shape, dtype=self.dtype))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.store.add(name, np.ones(shape, dtype=self.dtype))
