"""Sparse tensor representation, coordinate indexing, and rulebooks.

A sparse tensor is a list of active voxel coordinates plus an N x C feature
block.  Convolutions are executed from a rulebook: for every kernel offset,
the list of (input_row, output_row) pairs that offset connects.  Rulebooks
fix the iteration order of every reduction, which is what makes the whole
engine bitwise deterministic regardless of worker count.

Coordinate arrays are int64 of shape (N, 1 + D) with columns
``[batch, i0, ..., i_{D-1}]``.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DuplicateCoordinate, InvalidSpec, ShapeMismatch
from .tape import Tensor


def worker_count(workers: int | None = None) -> int:
    """Resolve a worker count; FOCALVOX_THREADS caps the default of 1."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("FOCALVOX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1


class VoxelCoord(NamedTuple):
    """One active grid cell: batch index plus integer grid indices."""

    batch: int
    ijk: tuple[int, ...]

    def as_row(self) -> np.ndarray:
        return np.asarray((self.batch, *self.ijk), dtype=np.int64)


@dataclass(frozen=True)
class KernelSpec:
    """Geometry of one sparse convolution."""

    kernel: tuple[int, ...]
    dilation: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        dims = len(self.kernel)
        for name in ("dilation", "stride", "padding"):
            if len(getattr(self, name)) != dims:
                raise InvalidSpec(f"{name} must have {dims} entries")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise InvalidSpec(f"kernel sizes must be odd and positive: {self.kernel}")
        if any(d < 1 for d in self.dilation):
            raise InvalidSpec(f"dilations must be positive: {self.dilation}")
        if any(s < 1 for s in self.stride):
            raise InvalidSpec(f"strides must be positive: {self.stride}")
        if any(p < 0 for p in self.padding):
            raise InvalidSpec(f"padding must be non-negative: {self.padding}")

    @property
    def dims(self) -> int:
        return len(self.kernel)

    @property
    def volume(self) -> int:
        v = 1
        for k in self.kernel:
            v *= k
        return v

    @property
    def is_unit_stride(self) -> bool:
        return all(s == 1 for s in self.stride)

    @classmethod
    def same(cls, kernel, dilation=None, dims: int | None = None) -> "KernelSpec":
        """Unit-stride spec with same-size padding ``dilation*(kernel-1)/2``."""
        if isinstance(kernel, int):
            if dims is None:
                raise InvalidSpec("dims required when kernel is a scalar")
            kernel = (kernel,) * dims
        kernel = tuple(int(k) for k in kernel)
        if dilation is None:
            dilation = (1,) * len(kernel)
        elif isinstance(dilation, int):
            dilation = (dilation,) * len(kernel)
        dilation = tuple(int(d) for d in dilation)
        padding = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        return cls(kernel, dilation, (1,) * len(kernel), padding)

    @classmethod
    def downsample(cls, dims: int) -> "KernelSpec":
        """Kernel 3, stride 2, padding 1 in every dim."""
        return cls((3,) * dims, (1,) * dims, (2,) * dims, (1,) * dims)


def centered_offsets(kernel: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Kernel offsets relative to the center, row-major over the volume."""
    ranges = [range(-(k - 1) // 2, (k - 1) // 2 + 1) for k in kernel]
    return list(itertools.product(*ranges))


def raw_offsets(kernel: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Kernel offsets as raw indices 0..k-1, row-major over the volume."""
    return list(itertools.product(*(range(k) for k in kernel)))


@dataclass
class SparseTensor:
    """Active voxel coordinates plus their feature rows.

    ``features`` is a tape-aware tensor so layers can thread gradients; a
    plain array is accepted and wrapped.
    """

    coords: np.ndarray
    features: Tensor
    spatial_shape: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(np.asarray(self.features))
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 1 + len(self.spatial_shape):
            raise ShapeMismatch(
                f"coords shape {self.coords.shape} does not match spatial rank "
                f"{len(self.spatial_shape)}"
            )
        if self.features.data.ndim != 2 or self.features.data.shape[0] != self.coords.shape[0]:
            raise ShapeMismatch(
                f"features rows {self.features.data.shape} != coords rows "
                f"{self.coords.shape[0]}"
            )
        if self.coords.shape[0]:
            if self.coords[:, 0].min(initial=0) < 0:
                raise InvalidSpec("batch indices must be non-negative")
            lo = self.coords[:, 1:].min(axis=0)
            hi = self.coords[:, 1:].max(axis=0)
            if (lo < 0).any() or (hi >= np.asarray(self.spatial_shape)).any():
                raise InvalidSpec("grid indices out of the declared spatial shape")
        if not np.all(np.isfinite(self.features.data)):
            raise InvalidSpec("features must be finite")

    @property
    def n_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.data.shape[1]

    @property
    def dims(self) -> int:
        return len(self.spatial_shape)

    def with_features(self, features: Tensor) -> "SparseTensor":
        """Same active set and grid, new feature block."""
        out = object.__new__(SparseTensor)
        out.coords = self.coords
        out.spatial_shape = self.spatial_shape
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features))
        if features.data.shape[0] != self.coords.shape[0]:
            raise ShapeMismatch("replacement features row count differs")
        out.features = features
        return out

    def coord_at(self, row: int) -> VoxelCoord:
        c = self.coords[row]
        return VoxelCoord(int(c[0]), tuple(int(v) for v in c[1:]))


class CoordIndex:
    """Bijection from (batch, ijk) coordinates onto row indices [0, N).

    Backed by a sorted flat-key array for vectorized lookups; absent
    coordinates report -1.
    """

    def __init__(self, coords: np.ndarray, spatial_shape: tuple[int, ...]):
        self.spatial_shape = tuple(spatial_shape)
        self._coords = coords
        keys = self._flatten(coords)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        if sorted_keys.size > 1 and (sorted_keys[1:] == sorted_keys[:-1]).any():
            dup_pos = int(np.nonzero(sorted_keys[1:] == sorted_keys[:-1])[0][0])
            row = order[dup_pos + 1]
            raise DuplicateCoordinate(
                f"coordinate {tuple(coords[row])} appears more than once"
            )
        self._sorted_keys = sorted_keys
        self._rows = order.astype(np.int64)

    def _flatten(self, coords: np.ndarray) -> np.ndarray:
        keys = coords[:, 0].astype(np.int64)
        for d, extent in enumerate(self.spatial_shape):
            keys = keys * extent + coords[:, 1 + d]
        return keys

    @property
    def n(self) -> int:
        return self._rows.size

    def lookup_many(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate; -1 where absent or out of grid."""
        m = coords.shape[0]
        result = np.full(m, -1, dtype=np.int64)
        if m == 0 or self.n == 0:
            return result
        shape = np.asarray(self.spatial_shape, dtype=np.int64)
        valid = (coords[:, 0] >= 0) & (coords[:, 1:] >= 0).all(axis=1)
        valid &= (coords[:, 1:] < shape).all(axis=1)
        if not valid.any():
            return result
        keys = self._flatten(coords[valid])
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self._sorted_keys.size - 1)
        hit = self._sorted_keys[pos] == keys
        rows = np.where(hit, self._rows[pos], -1)
        result[valid] = rows
        return result

    def lookup(self, coord) -> int | None:
        if isinstance(coord, VoxelCoord):
            row = coord.as_row()
        else:
            row = np.asarray(coord, dtype=np.int64)
        hit = self.lookup_many(row.reshape(1, -1))[0]
        return None if hit < 0 else int(hit)


def build_index(t: SparseTensor) -> CoordIndex:
    """Index the tensor's active set; raises DuplicateCoordinate on repeats."""
    return CoordIndex(t.coords, t.spatial_shape)


@dataclass
class Rulebook:
    """Execution plan for one sparse convolution.

    ``pairs[m]`` is an int64 array of shape (P, 2) with columns
    (input_row, output_row), sorted ascending by output_row then input_row.
    ``offsets[m]`` is the m-th kernel offset in row-major enumeration order:
    center-relative for submanifold rulebooks, raw 0..k-1 for regular ones.
    """

    offsets: tuple[tuple[int, ...], ...]
    pairs: list[np.ndarray]
    out_coords: np.ndarray
    out_spatial_shape: tuple[int, ...]
    kind: str = "submanifold"
    _total: int = field(default=-1, repr=False)

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def total_pairs(self) -> int:
        if self._total < 0:
            self._total = int(sum(p.shape[0] for p in self.pairs))
        return self._total


def _sort_pairs(in_rows: np.ndarray, out_rows: np.ndarray) -> np.ndarray:
    order = np.lexsort((in_rows, out_rows))
    return np.stack((in_rows[order], out_rows[order]), axis=1)


def build_rulebook_submanifold(
    t: SparseTensor, spec: KernelSpec, workers: int | None = None
) -> Rulebook:
    """Rulebook whose output active set equals the input active set.

    For the center-relative offset ``o``, pair (i, j) exists iff
    ``coords[i] == coords[j] - o * dilation`` and both sites are active.
    The center offset therefore pairs every row with itself.
    """
    if not spec.is_unit_stride:
        raise InvalidSpec("submanifold convolution requires stride 1")
    if spec.dims != t.dims:
        raise InvalidSpec(f"spec rank {spec.dims} != tensor rank {t.dims}")
    offsets = centered_offsets(spec.kernel)
    index = build_index(t)
    coords = t.coords
    dilation = np.asarray(spec.dilation, dtype=np.int64)
    n = t.n_active

    def pairs_for(off) -> np.ndarray:
        off_arr = np.asarray(off, dtype=np.int64) * dilation
        if not off_arr.any():
            rows = np.arange(n, dtype=np.int64)
            return np.stack((rows, rows), axis=1)
        targets = coords.copy()
        targets[:, 1:] -= off_arr
        in_rows = index.lookup_many(targets)
        out_rows = np.nonzero(in_rows >= 0)[0].astype(np.int64)
        return _sort_pairs(in_rows[out_rows], out_rows)

    pairs = _map_offsets(pairs_for, offsets, workers)
    return Rulebook(
        offsets=tuple(offsets),
        pairs=pairs,
        out_coords=coords,
        out_spatial_shape=t.spatial_shape,
        kind="submanifold",
    )


def regular_out_shape(
    in_shape: tuple[int, ...], spec: KernelSpec
) -> tuple[int, ...]:
    """ceil((in + 2*pad - dilation*(k-1) - 1) / stride) + 1 per dim."""
    out = []
    for s_in, k, d, s, p in zip(
        in_shape, spec.kernel, spec.dilation, spec.stride, spec.padding
    ):
        num = s_in + 2 * p - d * (k - 1) - 1
        out.append(max(0, -(-num // s) + 1))
    return tuple(out)


def build_rulebook_regular(
    t: SparseTensor,
    spec: KernelSpec,
    out_shape: tuple[int, ...],
    workers: int | None = None,
) -> Rulebook:
    """Rulebook for a strided (feature-expanding) sparse convolution.

    An output position j exists iff some input i and raw kernel offset o
    satisfy ``i == j * stride + o * dilation - padding`` with j inside
    ``out_shape``.  Output coordinates are sorted lexicographically by
    (batch, ijk).
    """
    if spec.dims != t.dims:
        raise InvalidSpec(f"spec rank {spec.dims} != tensor rank {t.dims}")
    offsets = raw_offsets(spec.kernel)
    coords = t.coords
    n = t.n_active
    dims = t.dims
    out_shape = tuple(int(s) for s in out_shape)
    dilation = np.asarray(spec.dilation, dtype=np.int64)
    stride = np.asarray(spec.stride, dtype=np.int64)
    padding = np.asarray(spec.padding, dtype=np.int64)
    shape_arr = np.asarray(out_shape, dtype=np.int64)

    def candidates_for(off):
        # solve j * stride = i + padding - o * dilation
        num = coords[:, 1:] + padding - np.asarray(off, dtype=np.int64) * dilation
        ok = (num % stride == 0).all(axis=1)
        j = num // stride
        ok &= (j >= 0).all(axis=1) & (j < shape_arr).all(axis=1)
        in_rows = np.nonzero(ok)[0].astype(np.int64)
        out_pos = np.concatenate(
            (coords[in_rows, :1], j[in_rows]), axis=1
        )
        return in_rows, out_pos

    per_offset = _map_offsets(candidates_for, offsets, workers)

    if n == 0 or not any(c[0].size for c in per_offset):
        empty_pairs = [np.empty((0, 2), dtype=np.int64) for _ in offsets]
        return Rulebook(
            offsets=tuple(offsets),
            pairs=empty_pairs,
            out_coords=np.empty((0, 1 + dims), dtype=np.int64),
            out_spatial_shape=out_shape,
            kind="regular",
        )

    all_out = np.concatenate([c[1] for c in per_offset], axis=0)
    out_coords = np.unique(all_out, axis=0)  # sorted lexicographically
    out_index = CoordIndex(out_coords, out_shape)
    pairs = []
    for in_rows, out_pos in per_offset:
        if in_rows.size == 0:
            pairs.append(np.empty((0, 2), dtype=np.int64))
            continue
        out_rows = out_index.lookup_many(out_pos)
        pairs.append(_sort_pairs(in_rows, out_rows))
    return Rulebook(
        offsets=tuple(offsets),
        pairs=pairs,
        out_coords=out_coords,
        out_spatial_shape=out_shape,
        kind="regular",
    )


def _map_offsets(fn, offsets, workers: int | None):
    """Evaluate fn per offset, results assembled in offset order.

    Work may run on a thread pool; the assembly order is fixed, so results
    are identical for any worker count.
    """
    n_workers = worker_count(workers)
    if n_workers <= 1 or len(offsets) <= 1:
        return [fn(off) for off in offsets]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, offsets))


def gather_scatter_matmul(
    features: np.ndarray,
    rulebook: Rulebook,
    weights: np.ndarray,
    bias: np.ndarray | None,
    workers: int | None = None,
) -> np.ndarray:
    """Execute a rulebook: ``out[j] = bias + sum_o sum_{(i,j)} x[i] @ W_o``.

    Per-offset contributions are accumulated into a float64 buffer in
    offset order (then cast back to the input dtype), which bounds
    summation-order error and keeps the result bitwise identical for any
    worker count.  Within one offset no two pairs share an output row, so
    the scatter is collision-free.
    """
    weights = np.asarray(weights)
    k = len(rulebook.offsets)
    if weights.ndim != 3 or weights.shape[0] != k:
        raise ShapeMismatch(
            f"need {k} per-offset weight blocks, got shape {weights.shape}"
        )
    if features.ndim != 2 or features.shape[1] != weights.shape[1]:
        raise ShapeMismatch(
            f"features {features.shape} incompatible with weights {weights.shape}"
        )
    c_out = weights.shape[2]
    if bias is not None and np.asarray(bias).shape != (c_out,):
        raise ShapeMismatch("bias length != output channels")
    m = rulebook.n_out
    acc = np.zeros((m, c_out), dtype=np.float64)
    if bias is not None:
        acc += np.asarray(bias, dtype=np.float64)

    def contrib_for(o):
        p = rulebook.pairs[o]
        if p.shape[0] == 0:
            return None
        return features[p[:, 0]] @ weights[o]

    partials = _map_offsets(contrib_for, range(k), workers)
    for o, part in enumerate(partials):
        if part is None:
            continue
        acc[rulebook.pairs[o][:, 1]] += part
    return acc.astype(features.dtype, copy=False)


def gather_scatter_vjp(
    features: np.ndarray,
    rulebook: Rulebook,
    weights: np.ndarray,
    cotangent: np.ndarray,
    with_bias: bool = True,
    workers: int | None = None,
):
    """Backward pass of :func:`gather_scatter_matmul`.

    Returns (grad_features, grad_weights, grad_bias); grad_bias is None
    when ``with_bias`` is false.  Accumulation order mirrors the forward
    pass, so gradients are deterministic as well.
    """
    weights = np.asarray(weights)
    k = len(rulebook.offsets)
    grad_features = np.zeros(features.shape, dtype=np.float64)
    grad_weights = np.zeros(weights.shape, dtype=np.float64)

    def grads_for(o):
        p = rulebook.pairs[o]
        if p.shape[0] == 0:
            return None
        cot_rows = cotangent[p[:, 1]]
        return cot_rows @ weights[o].T, features[p[:, 0]].T @ cot_rows

    partials = _map_offsets(grads_for, range(k), workers)
    for o, part in enumerate(partials):
        if part is None:
            continue
        gx, gw = part
        grad_features[rulebook.pairs[o][:, 0]] += gx
        grad_weights[o] += gw
    grad_bias = cotangent.sum(axis=0) if with_bias else None
    out_dtype = features.dtype
    return (
        grad_features.astype(out_dtype, copy=False),
        grad_weights.astype(out_dtype, copy=False),
        None if grad_bias is None else grad_bias.astype(out_dtype, copy=False),
    )
