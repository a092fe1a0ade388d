"""Dense per-voxel primitives with vector-Jacobian products.

Every function takes and returns :class:`~focalvox.tape.Tensor` values and
records itself on the tape carried by its inputs (if any).  Computation
preserves the dtype of its operands, so the same code runs in float32 for
the runtime path and float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import EmptyBatch, ShapeMismatch
from .tape import Tensor, active_tape

_INV_SQRT2 = np.float64(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = np.float64(1.0 / np.sqrt(2.0 * np.pi))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Rowwise affine map ``x @ weight + bias``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeMismatch("linear expects 2-D operands")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeMismatch(
            f"linear: {x.data.shape} @ {weight.data.shape} channel mismatch"
        )
    if bias is not None and bias.data.shape != (weight.data.shape[1],):
        raise ShapeMismatch("linear: bias length != output channels")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
    tape = active_tape(x, weight, bias)
    out = Tensor(data, tape)
    if tape is not None:
        xd, wd = x.data, weight.data
        inputs = (x, weight) if bias is None else (x, weight, bias)

        def vjp(cot):
            gx = cot @ wd.T
            gw = xd.T @ cot
            if bias is None:
                return gx, gw
            return gx, gw, cot.sum(axis=0)

        tape.record("linear", out, inputs, vjp)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the channel dimension, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data
    tape = active_tape(x, gain, bias)
    out = Tensor(data, tape)
    if tape is not None:
        gd = gain.data

        def vjp(cot):
            # d/dxhat, then the standard normalization backward per row
            g = cot * gd
            m1 = g.mean(axis=1, keepdims=True)
            m2 = (g * xhat).mean(axis=1, keepdims=True)
            gx = inv_std * (g - m1 - xhat * m2)
            return gx, (cot * xhat).sum(axis=0), cot.sum(axis=0)

        tape.record("layer_norm", out, (x, gain, bias), vjp)
    return out


def batch_norm_active(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.9,
):
    """Per-channel normalization over all active rows.

    Train mode computes statistics over the N active rows and returns
    updated running statistics alongside the output; eval mode normalizes
    with the running statistics as given.  Returns
    ``(out, new_running_mean, new_running_var)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    n = x.data.shape[0]
    eps_t = np.asarray(eps, dtype=x.data.dtype)
    tape = active_tape(x, gain, bias)
    if mode == "train":
        if n == 0:
            raise EmptyBatch("batch norm train mode needs at least one row")
        mean = x.data.mean(axis=0)
        centered = x.data - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps_t)
        xhat = centered * inv_std
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(x.data.dtype) + eps_t)
        xhat = (x.data - running_mean.astype(x.data.dtype)) * inv_std
        new_mean, new_var = running_mean, running_var
    out = Tensor(xhat * gain.data + bias.data, tape)
    if tape is not None:
        gd = gain.data

        if mode == "train":

            def vjp(cot):
                g = cot * gd
                m1 = g.mean(axis=0)
                m2 = (g * xhat).mean(axis=0)
                gx = inv_std * (g - m1 - xhat * m2)
                return gx, (cot * xhat).sum(axis=0), cot.sum(axis=0)

        else:

            def vjp(cot):
                return cot * gd * inv_std, (cot * xhat).sum(axis=0), cot.sum(axis=0)

        tape.record("batch_norm", out, (x, gain, bias), vjp)
    return out, new_mean, new_var


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu, ``x * Phi(x)`` via the error function."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    out = Tensor(xd * phi, x.tape)
    if x.tape is not None:

        def vjp(cot):
            pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
            return (cot * (phi + xd * pdf),)

        x.tape.record("gelu", out, (x,), vjp)
    return out


def sigmoid(x: Tensor) -> Tensor:
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)
    out = Tensor(data, x.tape)
    if x.tape is not None:

        def vjp(cot):
            return (cot * data * (1.0 - data),)

        x.tape.record("sigmoid", out, (x,), vjp)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.tape)
    if x.tape is not None:
        mask = x.data > 0

        def vjp(cot):
            return (cot * mask,)

        x.tape.record("relu", out, (x,), vjp)
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of equal-shape tensors (residual connections)."""
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"add: {x.data.shape} vs {y.data.shape}")
    out = Tensor(x.data + y.data, active_tape(x, y))
    if out.tape is not None:
        out.tape.record("add", out, (x, y), lambda cot: (cot, cot))
    return out


def multiply(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"multiply: {x.data.shape} vs {y.data.shape}")
    out = Tensor(x.data * y.data, active_tape(x, y))
    if out.tape is not None:
        xd, yd = x.data, y.data
        out.tape.record("multiply", out, (x, y), lambda cot: (cot * yd, cot * xd))
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]`` as its own tape node."""
    out = Tensor(x.data[:, start:stop].copy(), x.tape)
    if x.tape is not None:
        shape = x.data.shape

        def vjp(cot):
            g = np.zeros(shape, dtype=cot.dtype)
            g[:, start:stop] = cot
            return (g,)

        x.tape.record("slice_cols", out, (x,), vjp)
    return out


def weighted_level_sum(levels: list[Tensor], gates: Tensor) -> Tensor:
    """``sum_l levels[l] * gates[:, l]`` with a scalar gate per (row, level)."""
    n_levels = len(levels)
    if gates.data.shape[1] != n_levels:
        raise ShapeMismatch(
            f"{gates.data.shape[1]} gate columns for {n_levels} levels"
        )
    for f in levels:
        if f.data.shape != levels[0].data.shape:
            raise ShapeMismatch("level feature shapes differ")
        if f.data.shape[0] != gates.data.shape[0]:
            raise ShapeMismatch("gate rows != feature rows")
    acc = np.zeros_like(levels[0].data)
    for l, f in enumerate(levels):
        acc += f.data * gates.data[:, l : l + 1]
    tape = active_tape(gates, *levels)
    out = Tensor(acc, tape)
    if tape is not None:
        level_data = [f.data for f in levels]
        gate_data = gates.data

        def vjp(cot):
            grads = [cot * gate_data[:, l : l + 1] for l in range(n_levels)]
            ggate = np.stack(
                [(cot * level_data[l]).sum(axis=1) for l in range(n_levels)], axis=1
            )
            return (*grads, ggate)

        tape.record("weighted_level_sum", out, (*levels, gates), vjp)
    return out


def scatter_rows_sum(x: Tensor, groups: np.ndarray, n_groups: int) -> Tensor:
    """Sum rows of ``x`` into ``n_groups`` buckets given per-row group ids.

    Accumulation runs in ascending row order, so the result is independent
    of how callers ordered equal contributions.
    """
    if groups.shape != (x.data.shape[0],):
        raise ShapeMismatch("one group id per row required")
    out_data = np.zeros((n_groups, x.data.shape[1]), dtype=x.data.dtype)
    np.add.at(out_data, groups, x.data)
    out = Tensor(out_data, x.tape)
    if x.tape is not None:
        x.tape.record("scatter_rows_sum", out, (x,), lambda cot: (cot[groups],))
    return out


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows (with possible repetition); VJP scatter-adds back."""
    out = Tensor(x.data[rows], x.tape)
    if x.tape is not None:
        shape = x.data.shape

        def vjp(cot):
            g = np.zeros(shape, dtype=cot.dtype)
            np.add.at(g, rows, cot)
            return (g,)

        x.tape.record("gather_rows", out, (x,), vjp)
    return out


def row_l2(x: Tensor, row: int) -> Tensor:
    """L2 norm of one row as a scalar tensor."""
    v = x.data[row]
    s = np.sqrt(np.sum(v * v))
    out = Tensor(np.asarray(s, dtype=x.data.dtype), x.tape)
    if x.tape is not None:
        shape = x.data.shape

        def vjp(cot):
            g = np.zeros(shape, dtype=x.data.dtype)
            if s > 0:
                g[row] = cot * (v / s)
            return (g,)

        x.tape.record("row_l2", out, (x,), vjp)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), x.tape)
    if x.tape is not None:
        shape = x.data.shape
        size = x.data.size

        def vjp(cot):
            return (np.full(shape, cot / size, dtype=x.data.dtype),)

        x.tape.record("mean_all", out, (x,), vjp)
    return out


def mlp_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Single-hidden-layer MLP: linear, gelu, linear."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)
