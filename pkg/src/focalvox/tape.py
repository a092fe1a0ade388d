"""Reverse-mode gradient tape.

The engine records forward operations on a :class:`GradTape` as a Wengert
list.  Replaying the list in strict reverse order with per-node
vector-Jacobian products yields gradients for every tensor the computation
touched; tensors the computation never reached simply have no entry in the
gradient map.

A tape is single-writer: one forward pass per tape.  Tensors are immutable
value holders; parameters are plain leaf tensors with no tape attached, and
still receive gradients because nodes reference them as inputs.
"""

from __future__ import annotations

import enum
import itertools

import numpy as np

from .errors import ShapeMismatch

_uids = itertools.count()


class PrecisionMode(enum.Enum):
    """Scalar width for a computation path.

    ``STANDARD32`` is the runtime default; ``CHECK64`` is used by gradient
    checking and oracle tests where float32 rounding would mask defects.
    """

    STANDARD32 = "standard32"
    CHECK64 = "check64"

    @property
    def dtype(self):
        return np.float32 if self is PrecisionMode.STANDARD32 else np.float64


class Tensor:
    """A dense array plus an identity the tape can track.

    ``tape`` is None for leaf tensors (inputs before a pass starts,
    parameters, constants).  Results of recorded operations carry the tape
    they were recorded on.
    """

    __slots__ = ("data", "tape", "uid")

    def __init__(self, data, tape: "GradTape | None" = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.tape = tape
        self.uid = next(_uids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, uid={self.uid})"


class _Node:
    __slots__ = ("name", "out_uid", "in_uids", "vjp")

    def __init__(self, name, out_uid, in_uids, vjp):
        self.name = name
        self.out_uid = out_uid
        self.in_uids = in_uids
        self.vjp = vjp


class GradTape:
    """Ordered log of executed operations with replayable VJPs."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def record(self, name: str, output: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        """Append one node.

        ``vjp`` maps the cotangent of ``output`` to a tuple of cotangents,
        one per input (None for inputs that receive no gradient).
        """
        self._nodes.append(_Node(name, output.uid, tuple(t.uid for t in inputs), vjp))

    def node_names(self) -> list[str]:
        return [n.name for n in self._nodes]

    def gradients(self, output: Tensor, cotangent, trace: list[str] | None = None) -> dict[int, np.ndarray]:
        """Replay the tape backwards from ``output`` seeded with ``cotangent``.

        Returns a map from tensor uid to accumulated gradient.  Nodes whose
        output never received a cotangent are skipped; their inputs stay
        absent from the map.  ``trace``, if given, collects the names of
        visited nodes in replay order.
        """
        cot = np.asarray(cotangent)
        if cot.shape != output.data.shape:
            raise ShapeMismatch(
                f"cotangent shape {cot.shape} != output shape {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {output.uid: cot}
        for node in reversed(self._nodes):
            out_cot = grads.get(node.out_uid)
            if out_cot is None:
                continue
            if trace is not None:
                trace.append(node.name)
            for uid, g in zip(node.in_uids, node.vjp(out_cot)):
                if g is None:
                    continue
                acc = grads.get(uid)
                grads[uid] = g if acc is None else acc + g
        return grads


def active_tape(*tensors: Tensor | None) -> GradTape | None:
    """The single tape shared by the given tensors, or None.

    Mixing tensors from two different live tapes in one op is a usage bug
    (tapes are single-writer) and raises.
    """
    tape = None
    for t in tensors:
        if t is None or t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ShapeMismatch("operands recorded on different tapes")
    return tape


def grad_of(grads: dict[int, np.ndarray], tensor: Tensor) -> np.ndarray | None:
    """Gradient for ``tensor`` from a replay result, or None if untouched."""
    return grads.get(tensor.uid)
