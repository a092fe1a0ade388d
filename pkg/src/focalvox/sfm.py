"""Sparse focal modulation: hierarchical context extraction and gating.

The module replaces attention's query-key-value interactions with a stack
of small-kernel, increasingly dilated submanifold convolutions.  Each level
widens the receptive field; per-voxel gates weigh the levels; the summed
context modulates a query projection elementwise.  Everything preserves the
input's active set, so a whole block is a fixed-sparsity token mixer.

One fused linear produces queries, the level-0 context, and the gates
(split order [queries | context | gates]); gates are raw linear outputs by
default, with an optional sigmoid squashing.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .conv import SparseConvLayer, subm_conv
from .errors import InvalidSpec, ShapeMismatch
from .params import Initializer, ParamStore
from .sparse import KernelSpec, SparseTensor, build_rulebook_submanifold
from .tape import Tensor


@dataclass(frozen=True)
class SFMConfig:
    """Level count, per-level kernel sizes and dilations, channel width."""

    channels: int
    kernels: tuple[int, ...]
    dilations: tuple[int, ...]
    mlp_ratio: float = 2.0
    gate_activation: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.kernels) != len(self.dilations) or not self.kernels:
            raise InvalidSpec("kernels and dilations must be equal-length, non-empty")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise InvalidSpec(f"kernel sizes must be odd: {self.kernels}")
        if any(d < 1 for d in self.dilations):
            raise InvalidSpec(f"dilations must be positive: {self.dilations}")
        if self.gate_activation not in ("raw", "sigmoid"):
            raise InvalidSpec(f"unknown gate activation {self.gate_activation!r}")
        hidden = self.mlp_ratio * self.channels
        if hidden != int(hidden) or int(hidden) < 1:
            raise InvalidSpec(
                f"mlp_ratio * channels must be a positive integer, got {hidden}"
            )
        r = effective_receptive_field(self)
        if r < 1 or r % 2 == 0:
            raise InvalidSpec(f"receptive field must be a positive odd integer, got {r}")

    @property
    def levels(self) -> int:
        return len(self.kernels)

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.channels)


def effective_receptive_field(config: SFMConfig) -> int:
    """Receptive-field edge after all levels: 1 + sum (k_l - 1) * d_l voxels."""
    return 1 + sum((k - 1) * d for k, d in zip(config.kernels, config.dilations))


def erf_meters(config: SFMConfig, voxel_edge: float) -> float:
    # the voxel count is exact; round the product at 12 decimals so that a
    # short-decimal voxel edge yields the decimal-exact figure (19 * 0.1
    # must compare equal to 1.9, not 1.9000000000000001)
    return round(effective_receptive_field(config) * voxel_edge, 12)


def erf_radius(config: SFMConfig) -> int:
    """Chebyshev radius of possible influence: (edge - 1) / 2."""
    return (effective_receptive_field(config) - 1) // 2


@dataclass
class SfmModuleParams:
    in_proj_w: Tensor
    in_proj_b: Tensor
    level_convs: list[SparseConvLayer]
    h_w: Tensor
    h_b: Tensor


@dataclass
class SfmBlockParams:
    module: SfmModuleParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class SrbParams:
    """Two conv+BN stages with a skip; running stats are mutable buffers."""

    conv1: SparseConvLayer
    bn1_gain: Tensor
    bn1_bias: Tensor
    bn1_mean: Tensor
    bn1_var: Tensor
    conv2: SparseConvLayer
    bn2_gain: Tensor
    bn2_bias: Tensor
    bn2_mean: Tensor
    bn2_var: Tensor


def input_projection(
    x: Tensor, weight: Tensor, bias: Tensor, channels: int, levels: int
) -> tuple[Tensor, Tensor, Tensor]:
    """One fused linear C -> 2C+L split into (queries, base context, gates)."""
    if x.data.shape[1] != channels:
        raise ShapeMismatch(f"expected {channels} input channels, got {x.data.shape[1]}")
    if weight.data.shape != (channels, 2 * channels + levels):
        raise ShapeMismatch(
            f"projection weight {weight.data.shape} != ({channels}, {2 * channels + levels})"
        )
    fused = ops.linear(x, weight, bias)
    queries = ops.slice_cols(fused, 0, channels)
    base = ops.slice_cols(fused, channels, 2 * channels)
    gates = ops.slice_cols(fused, 2 * channels, 2 * channels + levels)
    return queries, base, gates


def context_levels(
    t: SparseTensor, config: SFMConfig, level_convs: list[SparseConvLayer]
) -> list[SparseTensor]:
    """Hierarchical focal features: level l is gelu(conv_l(level l-1)).

    All levels share the input's active set (submanifold property)."""
    if len(level_convs) != config.levels:
        raise ShapeMismatch(f"need {config.levels} level convs, got {len(level_convs)}")
    out = []
    cur = t
    for conv in level_convs:
        cur = subm_conv(cur, conv)
        cur = cur.with_features(ops.gelu(cur.features))
        out.append(cur)
    return out


def aggregate_context(
    level_features: list[Tensor], gates: Tensor, h_w: Tensor, h_b: Tensor
) -> Tensor:
    """Gate-weighted sum over levels, projected back to query space."""
    mixed = ops.weighted_level_sum(level_features, gates)
    return ops.linear(mixed, h_w, h_b)


def modulate(queries: Tensor, context: Tensor) -> Tensor:
    """Elementwise product: each query picks up its aggregated context."""
    return ops.multiply(queries, context)


def sfm_module(t: SparseTensor, config: SFMConfig, params: SfmModuleParams) -> SparseTensor:
    """Full mixer: project, extract context levels, gate, modulate."""
    queries, base, gates = input_projection(
        t.features, params.in_proj_w, params.in_proj_b, config.channels, config.levels
    )
    if config.gate_activation == "sigmoid":
        gates = ops.sigmoid(gates)
    levels = context_levels(t.with_features(base), config, params.level_convs)
    context = aggregate_context(
        [lv.features for lv in levels], gates, params.h_w, params.h_b
    )
    return t.with_features(modulate(queries, context))


def sfm_block(t: SparseTensor, config: SFMConfig, params: SfmBlockParams) -> SparseTensor:
    """Post-norm residual block around the mixer and a single-hidden MLP.

    y' = LN(z) + x;  y = LN(MLP(y')) + y'.
    """
    z = sfm_module(t, config, params.module)
    y1 = ops.add(ops.layer_norm(z.features, params.ln1_gain, params.ln1_bias), t.features)
    mlp = ops.mlp_block(y1, params.mlp_w1, params.mlp_b1, params.mlp_w2, params.mlp_b2)
    y = ops.add(ops.layer_norm(mlp, params.ln2_gain, params.ln2_bias), y1)
    return t.with_features(y)


def _bn(x, gain, bias, mean_t, var_t, mode):
    out, new_mean, new_var = ops.batch_norm_active(
        x, gain, bias, mean_t.data, var_t.data, mode=mode
    )
    if mode == "train":
        # the engine's one in-place update: running buffers track the batch
        mean_t.data = new_mean
        var_t.data = new_var
    return out


def srb_block(t: SparseTensor, params: SrbParams, bn_mode: str = "train") -> SparseTensor:
    """Residual conv block: conv-BN-relu-conv-BN, skip, relu."""
    h = subm_conv(t, params.conv1)
    h = h.with_features(
        ops.relu(_bn(h.features, params.bn1_gain, params.bn1_bias,
                     params.bn1_mean, params.bn1_var, bn_mode))
    )
    h = subm_conv(h, params.conv2)
    pre = _bn(h.features, params.bn2_gain, params.bn2_bias,
              params.bn2_mean, params.bn2_var, bn_mode)
    return t.with_features(ops.relu(ops.add(pre, t.features)))


# ---------------------------------------------------------------------------
# parameter creation / binding

def init_sfm_module(init: Initializer, prefix: str, config: SFMConfig, dims: int) -> None:
    c, levels = config.channels, config.levels
    init.weight(f"{prefix}.in_proj.weight", (c, 2 * c + levels), fan_in=c)
    init.zeros(f"{prefix}.in_proj.bias", (2 * c + levels,))
    for l, k in enumerate(config.kernels, start=1):
        volume = k**dims
        init.weight(f"{prefix}.level{l}.weight", (volume, c, c), fan_in=volume * c)
        init.zeros(f"{prefix}.level{l}.bias", (c,))
    init.weight(f"{prefix}.h.weight", (c, c), fan_in=c)
    init.zeros(f"{prefix}.h.bias", (c,))


def bind_sfm_module(store: ParamStore, prefix: str, config: SFMConfig, dims: int) -> SfmModuleParams:
    convs = []
    for l, (k, d) in enumerate(zip(config.kernels, config.dilations), start=1):
        spec = KernelSpec.same(k, d, dims=dims)
        convs.append(
            SparseConvLayer(
                spec,
                "submanifold",
                store.tensor(f"{prefix}.level{l}.weight"),
                store.tensor(f"{prefix}.level{l}.bias"),
            )
        )
    return SfmModuleParams(
        in_proj_w=store.tensor(f"{prefix}.in_proj.weight"),
        in_proj_b=store.tensor(f"{prefix}.in_proj.bias"),
        level_convs=convs,
        h_w=store.tensor(f"{prefix}.h.weight"),
        h_b=store.tensor(f"{prefix}.h.bias"),
    )


def init_sfm_block(init: Initializer, prefix: str, config: SFMConfig, dims: int) -> None:
    init_sfm_module(init, prefix, config, dims)
    c, hidden = config.channels, config.mlp_hidden
    init.ones(f"{prefix}.ln1.gain", (c,))
    init.zeros(f"{prefix}.ln1.bias", (c,))
    init.ones(f"{prefix}.ln2.gain", (c,))
    init.zeros(f"{prefix}.ln2.bias", (c,))
    init.weight(f"{prefix}.mlp.fc1.weight", (c, hidden), fan_in=c)
    init.zeros(f"{prefix}.mlp.fc1.bias", (hidden,))
    init.weight(f"{prefix}.mlp.fc2.weight", (hidden, c), fan_in=hidden)
    init.zeros(f"{prefix}.mlp.fc2.bias", (c,))


def bind_sfm_block(store: ParamStore, prefix: str, config: SFMConfig, dims: int) -> SfmBlockParams:
    return SfmBlockParams(
        module=bind_sfm_module(store, prefix, config, dims),
        ln1_gain=store.tensor(f"{prefix}.ln1.gain"),
        ln1_bias=store.tensor(f"{prefix}.ln1.bias"),
        ln2_gain=store.tensor(f"{prefix}.ln2.gain"),
        ln2_bias=store.tensor(f"{prefix}.ln2.bias"),
        mlp_w1=store.tensor(f"{prefix}.mlp.fc1.weight"),
        mlp_b1=store.tensor(f"{prefix}.mlp.fc1.bias"),
        mlp_w2=store.tensor(f"{prefix}.mlp.fc2.weight"),
        mlp_b2=store.tensor(f"{prefix}.mlp.fc2.bias"),
    )


def init_srb(init: Initializer, prefix: str, channels: int, dims: int) -> None:
    volume = 3**dims
    for stage in ("1", "2"):
        # convs feed a batch norm, so they carry no bias
        init.weight(f"{prefix}.conv{stage}.weight", (volume, channels, channels),
                    fan_in=volume * channels)
        init.ones(f"{prefix}.bn{stage}.gain", (channels,))
        init.zeros(f"{prefix}.bn{stage}.bias", (channels,))
        init.zeros(f"{prefix}.bn{stage}.running_mean", (channels,))
        init.ones(f"{prefix}.bn{stage}.running_var", (channels,))


def bind_srb(store: ParamStore, prefix: str, channels: int, dims: int) -> SrbParams:
    spec = KernelSpec.same(3, 1, dims=dims)
    return SrbParams(
        conv1=SparseConvLayer(spec, "submanifold", store.tensor(f"{prefix}.conv1.weight")),
        bn1_gain=store.tensor(f"{prefix}.bn1.gain"),
        bn1_bias=store.tensor(f"{prefix}.bn1.bias"),
        bn1_mean=store.tensor(f"{prefix}.bn1.running_mean"),
        bn1_var=store.tensor(f"{prefix}.bn1.running_var"),
        conv2=SparseConvLayer(spec, "submanifold", store.tensor(f"{prefix}.conv2.weight")),
        bn2_gain=store.tensor(f"{prefix}.bn2.gain"),
        bn2_bias=store.tensor(f"{prefix}.bn2.bias"),
        bn2_mean=store.tensor(f"{prefix}.bn2.running_mean"),
        bn2_var=store.tensor(f"{prefix}.bn2.running_var"),
    )


def sfm_module_param_count(config: SFMConfig, dims: int) -> int:
    """Closed-form trainable scalar count of one mixer module."""
    c, levels = config.channels, config.levels
    total = c * (2 * c + levels) + (2 * c + levels)  # fused projection
    for k in config.kernels:
        total += (k**dims) * c * c + c  # level conv + bias
    total += c * c + c  # h projection
    return total


def sfm_pair_count(t: SparseTensor, config: SFMConfig) -> dict[str, int]:
    """Exact interaction counts of one mixer application on a scene.

    Rulebook pairs are counted level by level; the gate and modulation
    stages contribute N*L and N rowwise interactions.
    """
    n = t.n_active
    conv_pairs = 0
    for k, d in zip(config.kernels, config.dilations):
        spec = KernelSpec.same(k, d, dims=t.dims)
        rb = build_rulebook_submanifold(t, spec)
        conv_pairs += rb.total_pairs
    return {
        "conv_pairs": conv_pairs,
        "gate": n * config.levels,
        "modulation": n,
        "total": conv_pairs + n * config.levels + n,
    }
