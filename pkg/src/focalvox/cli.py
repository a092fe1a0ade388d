"""Command-line surface.

Subcommands: voxelize, forward, erf, bench, gradcheck, selftest.  Exit
codes: 0 success, 1 validation/usage error, 2 I/O error.  All file output
is written atomically and is byte-identical for identical argv and seeds.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .backbone import SfmNet, init_network, sfmnet_forward
from .bench import scaling_experiment
from .config import load_config
from .erf import emit_pgm, erf_gradient_map, select_query
from .errors import FocalvoxError, InvalidSpec, IoError
from .fileio import atomic_write_text
from .points import load_points, voxelize_vfe
from .selftest import GRADCHECK_MODULES, gradcheck_suite, oracle_suite
from .sfm import SFMConfig
from .weights import load_weights


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="focalvox", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_points_config(p):
        p.add_argument("--points", required=True, help="point cloud file")
        p.add_argument("--format", default="csv", choices=("csv", "bin"))
        p.add_argument("--config", required=True, help="network config JSON")

    p = sub.add_parser("voxelize", help="dump the voxelized scene as CSV")
    add_points_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("forward", help="full network pass; dump BEV cells")
    add_points_config(p)
    p.add_argument("--weights", help="weights container path")
    p.add_argument("--init-seed", type=int, help="synthesize weights from a seed")
    p.add_argument("--dump", required=True)

    p = sub.add_parser("erf", help="gradient receptive-field probe")
    add_points_config(p)
    p.add_argument("--weights")
    p.add_argument("--init-seed", type=int)
    p.add_argument("--query", help="active voxel 'x,y,z' in the probed output grid")
    p.add_argument("--seed", type=int, help="seeded random query selection")
    p.add_argument("--stage", type=int, default=1, choices=(1, 2, 3, 4),
                   help="probe through stages 1..k of the 3-D backbone")
    p.add_argument("--out-pgm", required=True)
    p.add_argument("--out-csv")

    p = sub.add_parser("bench", help="interaction-count scaling experiment")
    p.add_argument("--mixer", required=True, choices=("sfm", "local-attention"))
    p.add_argument("--n-list", required=True, help="comma-separated voxel counts")
    p.add_argument("--density", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernels", default="3,3")
    p.add_argument("--dilations", default="1,3")
    p.add_argument("--window", type=int, default=5, help="attention window edge")
    p.add_argument("--report", help="JSON-lines output path (default stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--module", default="all", choices=GRADCHECK_MODULES)

    sub.add_parser("selftest", help="run the built-in oracle suite")
    return parser


def _format_row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _load_net(args):
    cfg = load_config(args.config)
    if getattr(args, "weights", None):
        store = load_weights(args.weights, init_network(cfg))
    elif getattr(args, "init_seed", None) is not None:
        store = init_network(cfg, seed=args.init_seed)
    else:
        raise InvalidSpec("need --weights or --init-seed")
    return cfg, store


def cmd_voxelize(args) -> int:
    cfg = load_config(args.config)
    store = init_network(cfg)  # VFE weights come from the config seed
    cloud = load_points(args.points, args.format)
    t = voxelize_vfe(cloud, cfg.voxelizer, store.tensor("vfe.weight"),
                     store.tensor("vfe.bias"))
    lines = ["b,x,y,z," + ",".join(f"f{i}" for i in range(t.channels))]
    for row in range(t.n_active):
        b, x, y, z = (int(v) for v in t.coords[row])
        lines.append(f"{b},{x},{y},{z}," + _format_row(t.features.data[row]))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {t.n_active} voxels to {args.out}")
    return 0


def cmd_forward(args) -> int:
    cfg, store = _load_net(args)
    cloud = load_points(args.points, args.format)
    bev, logits = sfmnet_forward(cloud, cfg, store)
    header = (
        "b,x,y,"
        + ",".join(f"f{i}" for i in range(bev.channels))
        + ","
        + ",".join(f"logit{i}" for i in range(logits.data.shape[1]))
    )
    lines = [header]
    for row in range(bev.n_active):
        b, x, y = (int(v) for v in bev.coords[row])
        lines.append(
            f"{b},{x},{y},"
            + _format_row(bev.features.data[row])
            + ","
            + _format_row(logits.data[row])
        )
    atomic_write_text(args.dump, "\n".join(lines) + "\n")
    print(f"wrote {bev.n_active} BEV cells to {args.dump}")
    return 0


def _probe_stack(net: SfmNet, depth: int):
    from .backbone import downsample, run_stage

    def stack(t):
        for i in range(depth):
            t = run_stage(t, net.config.stages[i], net.stages[i], bn_mode="eval")
            if i < depth - 1:
                t = downsample(t, net.downs[i], bn_mode="eval")
        return t

    return stack


def cmd_erf(args) -> int:
    cfg, store = _load_net(args)
    net = SfmNet(cfg, store)
    cloud = load_points(args.points, args.format)
    scene = voxelize_vfe(cloud, cfg.voxelizer, net.vfe_w, net.vfe_b)
    stack = _probe_stack(net, args.stage)
    if args.query:
        parts = [int(v) for v in args.query.split(",")]
        if len(parts) != 3:
            raise InvalidSpec("--query must be 'x,y,z'")
        probe_out = stack(scene)
        query = select_query(probe_out, coord=(0, *parts))
    elif args.seed is not None:
        probe_out = stack(scene)
        query = select_query(probe_out, seed=args.seed)
    else:
        raise InvalidSpec("need --query or --seed")
    erf = erf_gradient_map(stack, scene, query)
    emit_pgm(erf, args.out_pgm, plane="bev", csv_path=args.out_csv)
    print(
        f"query {(query.batch, *query.ijk)}: {int(np.count_nonzero(erf.magnitudes))} "
        f"reached voxels, peak {erf.normalization:.6g}, wrote {args.out_pgm}"
    )
    return 0


def cmd_bench(args) -> int:
    n_list = [int(v) for v in args.n_list.split(",") if v]
    if not n_list:
        raise InvalidSpec("--n-list is empty")
    kernels = tuple(int(v) for v in args.kernels.split(","))
    dilations = tuple(int(v) for v in args.dilations.split(","))
    config = SFMConfig(channels=16, kernels=kernels, dilations=dilations)
    reports, slope = scaling_experiment(
        args.mixer, n_list, args.density, args.seed,
        config=config, window_edge=args.window,
    )
    lines = [r.to_json() for r in reports]
    lines.append(
        '{"kind": "%s", "slope": %r, "runs": %d}' % (args.mixer, slope, len(reports))
    )
    text = "\n".join(lines) + "\n"
    if args.report:
        atomic_write_text(args.report, text)
        print(f"wrote {len(reports)} runs to {args.report} (slope {slope:.4f})")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    checks = gradcheck_suite(args.seed, args.module)
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} gradient checks passed")
    return 0 if failed == 0 else 1


def cmd_selftest(args) -> int:
    checks = oracle_suite()
    failed = 0
    for name, ok, detail in checks:
        suffix = f": {detail}" if detail else ""
        print(f"{'PASS' if ok else 'FAIL'} {name}{suffix}")
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


_HANDLERS = {
    "voxelize": cmd_voxelize,
    "forward": cmd_forward,
    "erf": cmd_erf,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except FocalvoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
