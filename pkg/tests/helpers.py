"""Shared test fixtures: scene generators and independent dense oracles.

The oracles here never touch rulebooks or gather-scatter plans; they work
on dense float64 grids so that agreement with the sparse engine is a real
cross-check, not a tautology.
"""

import numpy as np

from focalvox.sparse import SparseTensor, centered_offsets, raw_offsets


def random_sparse(rng, spatial_shape, density, channels, batches=1, dtype=np.float32):
    """Uniform-occupancy random scene with standard-normal features."""
    cells = []
    for b in range(batches):
        mask = rng.random(spatial_shape) < density
        idx = np.argwhere(mask)
        if idx.size:
            cells.append(
                np.concatenate(
                    (np.full((idx.shape[0], 1), b, dtype=np.int64), idx.astype(np.int64)),
                    axis=1,
                )
            )
    if cells:
        coords = np.concatenate(cells, axis=0)
    else:
        coords = np.empty((0, 1 + len(spatial_shape)), dtype=np.int64)
    feats = rng.standard_normal((coords.shape[0], channels)).astype(dtype)
    return SparseTensor(coords, feats, spatial_shape)


def sparse_from_coords(coords, spatial_shape, channels, rng=None, dtype=np.float32):
    coords = np.asarray(coords, dtype=np.int64)
    if rng is None:
        feats = np.ones((coords.shape[0], channels), dtype=dtype)
    else:
        feats = rng.standard_normal((coords.shape[0], channels)).astype(dtype)
    return SparseTensor(coords, feats, spatial_shape)


def densify(t):
    """(B, *S, C) float64 grid plus (B, *S) occupancy mask."""
    n_batch = int(t.coords[:, 0].max()) + 1 if t.n_active else 1
    dense = np.zeros((n_batch, *t.spatial_shape, t.channels), dtype=np.float64)
    active = np.zeros((n_batch, *t.spatial_shape), dtype=bool)
    for row in range(t.n_active):
        key = tuple(t.coords[row])
        dense[key] = t.features.data[row]
        active[key] = True
    return dense, active


def _gather_shifted(dense, active, out_shape, stride, shift):
    """out[j] = x[j * stride + shift], zero where the source leaves the grid.

    Returns the gathered block and the per-position validity-and-active
    mask (used to decide which outputs are reachable).
    """
    spatial = dense.shape[1:-1]
    idxs, valids = [], []
    for d, extent in enumerate(out_shape):
        src = np.arange(extent) * stride[d] + shift[d]
        ok = (src >= 0) & (src < spatial[d])
        idxs.append(np.clip(src, 0, spatial[d] - 1))
        valids.append(ok)
    valid = valids[0]
    for v in valids[1:]:
        valid = valid[..., None] & v
    grid = np.ix_(*idxs)
    gathered = dense[(slice(None),) + grid] * valid[None, ..., None]
    touched = active[(slice(None),) + grid] & valid[None]
    return gathered, touched


def dense_subm_oracle(t, kernel, dilation, weights, bias):
    """Dense-grid submanifold convolution, evaluated at active sites.

    out[p] = bias + sum_o x[p - o*dilation] @ W_o over centered offsets o,
    masked to the input's active set.  Returns an (N, C_out) block aligned
    with t's row order.
    """
    dense, active = densify(t)
    weights = np.asarray(weights, dtype=np.float64)
    c_out = weights.shape[2]
    out = np.zeros((*dense.shape[:-1], c_out), dtype=np.float64)
    stride = (1,) * len(kernel)
    for m, off in enumerate(centered_offsets(kernel)):
        shift = tuple(-o * d for o, d in zip(off, dilation))
        gathered, _ = _gather_shifted(dense, active, t.spatial_shape, stride, shift)
        out += gathered @ weights[m]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    rows = np.zeros((t.n_active, c_out), dtype=np.float64)
    for row in range(t.n_active):
        rows[row] = out[tuple(t.coords[row])]
    return rows


def dense_regular_oracle(t, spec, out_shape, weights, bias):
    """Dense-grid strided convolution plus the reachable-output mask.

    out[j] = bias + sum_o x[j*stride + o*dilation - padding] @ W_o over raw
    offsets; a position is reachable iff at least one source was active.
    Returns (out_grid (B, *out_shape, C_out), reachable (B, *out_shape)).
    """
    dense, active = densify(t)
    weights = np.asarray(weights, dtype=np.float64)
    c_out = weights.shape[2]
    out = np.zeros((dense.shape[0], *out_shape, c_out), dtype=np.float64)
    reachable = np.zeros((dense.shape[0], *out_shape), dtype=bool)
    for m, off in enumerate(raw_offsets(spec.kernel)):
        shift = tuple(
            o * d - p for o, d, p in zip(off, spec.dilation, spec.padding)
        )
        gathered, touched = _gather_shifted(dense, active, out_shape, spec.stride, shift)
        out += gathered @ weights[m]
        reachable |= touched
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out, reachable


def triple_loop_subm_oracle(t, kernel, dilation, weights, bias):
    """Scalar-loop submanifold oracle for tiny grids; cross-checks the
    vectorized dense oracle above."""
    dense, active = densify(t)
    weights = np.asarray(weights, dtype=np.float64)
    c_out = weights.shape[2]
    offs = centered_offsets(kernel)
    rows = np.zeros((t.n_active, c_out), dtype=np.float64)
    spatial = t.spatial_shape
    for row in range(t.n_active):
        b, *pos = (int(v) for v in t.coords[row])
        acc = np.zeros(c_out, dtype=np.float64)
        for m, off in enumerate(offs):
            src = [p - o * d for p, o, d in zip(pos, off, dilation)]
            if any(s < 0 or s >= e for s, e in zip(src, spatial)):
                continue
            if not active[(b, *src)]:
                continue
            for ci in range(t.channels):
                acc += dense[(b, *src)][ci] * weights[m, ci]
        if bias is not None:
            acc = acc + np.asarray(bias, dtype=np.float64)
        rows[row] = acc
    return rows


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0)) / denom
