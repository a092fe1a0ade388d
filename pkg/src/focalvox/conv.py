"""Sparse convolution layers (submanifold and regular) with VJPs.

A layer holds its kernel spec and per-offset weight blocks; the forward
builds (or reuses) a rulebook and runs the gather-scatter plan.  The same
code serves 2-D and 3-D tensors since everything is parameterized by the
coordinate rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec, ShapeMismatch
from .sparse import (
    KernelSpec,
    Rulebook,
    SparseTensor,
    build_rulebook_regular,
    build_rulebook_submanifold,
    gather_scatter_matmul,
    gather_scatter_vjp,
    regular_out_shape,
)
from .tape import Tensor, active_tape


@dataclass
class SparseConvLayer:
    """Kernel spec plus parameters for one sparse convolution.

    kind is "submanifold" (stride 1, active set preserved) or "regular"
    (strided, active set expands to every reachable output position).
    ``weight`` is a (kernel_volume, C_in, C_out) tensor; ``bias`` is
    optional (layers feeding a batch norm drop it).
    """

    spec: KernelSpec
    kind: str
    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.kind not in ("submanifold", "regular"):
            raise InvalidSpec(f"unknown conv kind {self.kind!r}")
        if self.kind == "submanifold" and not self.spec.is_unit_stride:
            raise InvalidSpec("submanifold convolution requires stride 1")
        if self.weight.data.ndim != 3 or self.weight.data.shape[0] != self.spec.volume:
            raise InvalidSpec(
                f"weight shape {self.weight.data.shape} != "
                f"(kernel volume {self.spec.volume}, C_in, C_out)"
            )

    @property
    def in_channels(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.data.shape[2]


def _apply_rulebook(t: SparseTensor, layer: SparseConvLayer, rulebook: Rulebook) -> SparseTensor:
    x = t.features
    if x.data.shape[1] != layer.in_channels:
        raise ShapeMismatch(
            f"input has {x.data.shape[1]} channels, layer expects {layer.in_channels}"
        )
    weight, bias = layer.weight, layer.bias
    out_data = gather_scatter_matmul(
        x.data, rulebook, weight.data, None if bias is None else bias.data
    )
    tape = active_tape(x, weight, bias)
    out = Tensor(out_data, tape)
    if tape is not None:
        xd, wd = x.data, weight.data
        inputs = (x, weight) if bias is None else (x, weight, bias)

        def vjp(cot):
            gx, gw, gb = gather_scatter_vjp(xd, rulebook, wd, cot, with_bias=bias is not None)
            if bias is None:
                return gx, gw
            return gx, gw, gb

        tape.record(f"conv_{layer.kind}", out, inputs, vjp)
    return SparseTensor(rulebook.out_coords, out, rulebook.out_spatial_shape)


def subm_conv(t: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    """Submanifold sparse convolution: output coords == input coords."""
    if layer.kind != "submanifold":
        raise InvalidSpec("subm_conv requires a submanifold layer")
    rulebook = build_rulebook_submanifold(t, layer.spec)
    return _apply_rulebook(t, layer, rulebook)


def regular_conv_down(t: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    """Regular (strided) sparse convolution; dilates/downsamples the active set."""
    if layer.kind != "regular":
        raise InvalidSpec("regular_conv_down requires a regular layer")
    out_shape = regular_out_shape(t.spatial_shape, layer.spec)
    rulebook = build_rulebook_regular(t, layer.spec, out_shape)
    return _apply_rulebook(t, layer, rulebook)


def conv_vjp(
    cotangent: np.ndarray,
    features: np.ndarray,
    rulebook: Rulebook,
    weights: np.ndarray,
    with_bias: bool = True,
):
    """Standalone backward for a saved forward state.

    ``grad_features[i] = sum_o sum_{(i,j)} cot[j] @ W_o^T``;
    ``grad_W_o = sum_{(i,j)} x[i]^T @ cot[j]``; ``grad_bias = sum_j cot[j]``.
    """
    if cotangent.shape[0] != rulebook.n_out:
        raise ShapeMismatch(
            f"cotangent rows {cotangent.shape[0]} != rulebook outputs {rulebook.n_out}"
        )
    return gather_scatter_vjp(features, rulebook, weights, cotangent, with_bias=with_bias)
