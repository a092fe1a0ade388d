"""Interaction counting: hierarchical-conv mixing vs. local attention.

The mixer touches each voxel through rulebook pairs (at most kernel-volume
neighbors per level), so its interaction count is linear in the number of
active voxels.  Local attention pays query-key plus attention-value work
quadratic in each window's occupancy.  Both quantities are counted exactly
here, and a naive local-attention reference is executable for small scenes
so the count model can be cross-checked against instrumented execution.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DegenerateFit, InvalidSpec, ShapeMismatch
from .sfm import SFMConfig, effective_receptive_field, sfm_pair_count
from .sparse import SparseTensor, build_index
from .tape import Tensor

MIXER_KINDS = ("sfm", "local-attention")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor


def init_attention_params(rng, channels: int, dtype=np.float32) -> AttentionParams:
    scale = 1.0 / np.sqrt(channels)
    def w():
        return Tensor(rng.uniform(-scale, scale, (channels, channels)).astype(dtype))
    def b():
        return Tensor(np.zeros(channels, dtype=dtype))
    return AttentionParams(w(), w(), w(), b(), b(), b())


@dataclass
class BenchReport:
    """One benchmark run; interaction_pairs is exactly reproducible."""

    kind: str
    n_active: int
    edge_voxels: int
    interaction_pairs: int
    bytes_model: int
    wall_ns: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "n_active": self.n_active,
                "edge_voxels": self.edge_voxels,
                "interaction_pairs": self.interaction_pairs,
                "bytes_model": self.bytes_model,
                "wall_ns": self.wall_ns,
            },
            sort_keys=True,
        )


def window_neighbor_rows(t: SparseTensor, window_edge: int) -> list[np.ndarray]:
    """Active rows inside each voxel's centered Chebyshev window."""
    if window_edge % 2 == 0 or window_edge < 1:
        raise InvalidSpec("window edge must be odd and positive")
    index = build_index(t)
    radius = (window_edge - 1) // 2
    dims = t.dims
    hits = []
    for off in itertools.product(range(-radius, radius + 1), repeat=dims):
        targets = t.coords.copy()
        targets[:, 1:] += np.asarray(off, dtype=np.int64)
        hits.append(index.lookup_many(targets))
    stacked = np.stack(hits, axis=1)  # (N, window volume)
    return [row[row >= 0] for row in stacked]


def local_attention_reference(
    t: SparseTensor, window_edge: int, params: AttentionParams
) -> SparseTensor:
    """Single-head attention over each voxel's active window.

    Per query: softmax(q k^T / sqrt(C)) v over the active voxels of its
    centered window (the query itself always included).  Coordinates are
    preserved.
    """
    x = t.features
    c = x.data.shape[1]
    if params.wq.data.shape != (c, c):
        raise ShapeMismatch(f"attention projections must be {c}x{c}")
    q = ops.linear(x, params.wq, params.bq).data
    k = ops.linear(x, params.wk, params.bk).data
    v = ops.linear(x, params.wv, params.bv).data
    scale = 1.0 / np.sqrt(c)
    neighbors = window_neighbor_rows(t, window_edge)
    out = np.zeros_like(v)
    for row, nbrs in enumerate(neighbors):
        logits = (k[nbrs] @ q[row]) * scale
        logits = logits - logits.max()
        weights = np.exp(logits)
        weights = weights / weights.sum()
        out[row] = weights @ v[nbrs]
    return t.with_features(Tensor(out.astype(x.data.dtype)))


def count_interactions(kind: str, scene: SparseTensor, config) -> int:
    """Exact interaction-pair count for one mixer application.

    sfm: rulebook pairs across all levels plus N*L gate products plus N
    modulation products.  local-attention: 2 * sum_q n_w(q), one n_w(q)
    factor for query-key and one for attention-value work.
    """
    if kind == "sfm":
        if not isinstance(config, SFMConfig):
            raise InvalidSpec("sfm counting needs an SFMConfig")
        return sfm_pair_count(scene, config)["total"]
    if kind == "local-attention":
        window_edge = int(config)
        occupancy = window_occupancy(scene, window_edge)
        return int(2 * occupancy.sum())
    raise InvalidSpec(f"unknown mixer kind {kind!r}; choose from {MIXER_KINDS}")


def global_attention_pairs(n_active: int) -> int:
    """Analytic count model for unwindowed attention: every query attends
    to every key, n^2 pairs per stage.  Deliberately never executed; at
    scene scale the dense logits alone exhaust memory."""
    return int(n_active) * int(n_active)


def window_occupancy(t: SparseTensor, window_edge: int) -> np.ndarray:
    """n_w(q): active-voxel count in each voxel's centered window.

    Computed from a dense summed-area table per batch, so it is exact and
    independent of any attention execution path.
    """
    if window_edge % 2 == 0 or window_edge < 1:
        raise InvalidSpec("window edge must be odd and positive")
    radius = (window_edge - 1) // 2
    dims = t.dims
    counts = np.zeros(t.n_active, dtype=np.int64)
    if t.n_active == 0:
        return counts
    for b in np.unique(t.coords[:, 0]):
        rows = np.nonzero(t.coords[:, 0] == b)[0]
        occ = np.zeros(t.spatial_shape, dtype=np.int64)
        occ[tuple(t.coords[rows, 1 + d] for d in range(dims))] = 1
        table = occ
        for axis in range(dims):
            table = table.cumsum(axis=axis)
        padded = np.zeros(tuple(s + 1 for s in table.shape), dtype=np.int64)
        padded[(slice(1, None),) * dims] = table
        for i, row in enumerate(rows):
            pos = t.coords[row, 1:]
            lo = np.maximum(pos - radius, 0)
            hi = np.minimum(pos + radius + 1, np.asarray(t.spatial_shape))
            total = 0
            for corner in itertools.product((0, 1), repeat=dims):
                sign = (-1) ** (dims - sum(corner))
                idx = tuple(hi[d] if corner[d] else lo[d] for d in range(dims))
                total += sign * padded[idx]
            counts[row] = total
    return counts


def sfm_bytes_model(n: int, config: SFMConfig, pair_total: int) -> int:
    """Analytic peak-intermediate estimate in bytes (float32 activations,
    int64 rulebook pairs)."""
    c, levels = config.channels, config.levels
    activations = 4 * n * (2 * c + levels) + 4 * n * c * (levels + 1)
    rulebook = 16 * pair_total
    return int(activations + rulebook)


def attention_bytes_model(n: int, channels: int, occupancy: np.ndarray) -> int:
    """qkv blocks plus the densest window's logits plus neighbor indices."""
    qkv = 12 * n * channels
    densest = int(occupancy.max()) if occupancy.size else 0
    return int(qkv + 4 * densest * densest + 8 * int(occupancy.sum()))


def uniform_scene(
    n_active: int, grid_shape: tuple[int, ...], seed: int, channels: int = 1
) -> SparseTensor:
    """Exactly n distinct active cells drawn uniformly over the grid."""
    volume = int(np.prod(grid_shape))
    if n_active > volume:
        raise InvalidSpec(f"cannot place {n_active} voxels in {volume} cells")
    rng = np.random.default_rng(seed)
    flat = rng.choice(volume, size=n_active, replace=False)
    flat.sort()
    coords = np.zeros((n_active, 1 + len(grid_shape)), dtype=np.int64)
    rem = flat
    for d in range(len(grid_shape) - 1, -1, -1):
        coords[:, 1 + d] = rem % grid_shape[d]
        rem = rem // grid_shape[d]
    feats = rng.standard_normal((n_active, channels)).astype(np.float32)
    return SparseTensor(coords, feats, grid_shape)


def _fit_slope(xs: list[float], ys: list[float]) -> float:
    distinct = sorted(set(xs))
    if len(distinct) < 2:
        raise DegenerateFit(f"need at least two distinct abscissae, got {distinct}")
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


def scaling_experiment(
    kind: str,
    n_list: list[int],
    density: float,
    seed: int,
    config: SFMConfig | None = None,
    window_edge: int = 5,
    windows_per_axis: int = 4,
):
    """Synthetic uniform-density scenes, exact counts, fitted log-log slope.

    sfm: the grid volume grows with N so density stays fixed; the fit is
    log(total pairs) against log(N) and lands near 1.  local-attention:
    the window partition is fixed and occupancy grows with N; the fit is
    log(pairs per window) against log(mean window occupancy) and lands
    near 2.  Returns (reports, slope).
    """
    if kind not in MIXER_KINDS:
        raise InvalidSpec(f"unknown mixer kind {kind!r}")
    if not 0 < density <= 1:
        raise InvalidSpec("density must be in (0, 1]")
    if kind == "sfm" and config is None:
        config = SFMConfig(channels=16, kernels=(3, 3), dilations=(1, 3))
    reports = []
    xs, ys = [], []
    for i, n in enumerate(n_list):
        if kind == "sfm":
            edge = max(4, int(round((n / density) ** (1.0 / 3.0))))
            scene = uniform_scene(n, (edge, edge, edge), seed + i, config.channels)
            start = time.perf_counter_ns()
            detail = sfm_pair_count(scene, config)
            wall = time.perf_counter_ns() - start
            pairs = detail["total"]
            reports.append(
                BenchReport(
                    kind="sfm",
                    n_active=scene.n_active,
                    edge_voxels=effective_receptive_field(config),
                    interaction_pairs=pairs,
                    bytes_model=sfm_bytes_model(scene.n_active, config, detail["conv_pairs"]),
                    wall_ns=wall,
                )
            )
            xs.append(float(scene.n_active))
            ys.append(float(pairs))
        else:
            grid_edge = window_edge * windows_per_axis
            scene = uniform_scene(n, (grid_edge,) * 3, seed + i)
            start = time.perf_counter_ns()
            occupancy = window_occupancy(scene, window_edge)
            pairs = int(2 * occupancy.sum())
            wall = time.perf_counter_ns() - start
            reports.append(
                BenchReport(
                    kind="local-attention",
                    n_active=scene.n_active,
                    edge_voxels=window_edge,
                    interaction_pairs=pairs,
                    bytes_model=attention_bytes_model(scene.n_active, 1, occupancy),
                    wall_ns=wall,
                )
            )
            n_windows = windows_per_axis**3
            xs.append(scene.n_active / n_windows)
            ys.append(pairs / n_windows)
    return reports, _fit_slope(xs, ys)
