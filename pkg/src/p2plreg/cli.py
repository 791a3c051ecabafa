"""Command-line entry point: dataset synthesis, registration runs, gradient
checks, and timing/memory benchmarks.

Every subcommand echoes its configuration into the output directory and is
deterministic given that configuration (timings excluded). Worker counts
come from ``P2PL_THREADS``; per-item seeds are derived up front, so results
are identical for any thread count and output rows keep item order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio
from .cloud import RegistrationPair
from .correspond import nn_correspond
from .gradcheck import FDConfig, compare, fd_bundle, make_instance
from .gradient import backward, rigid_motion_loss
from .geometry import apply_transform, to_gvector
from .metrics import build_report, chamfer, euler_zyx_angles, rotation_errors
from .seeding import derived_seed
from .solver import SingularSystem, icp, register_p2pl
from .synth import SHAPE_KINDS, SynthConfig, estimate_normals, make_cpu_pair, synth_shape

FLOAT = "%.17g"


def _worker_count() -> int:
    env = os.environ.get("P2PL_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _pool_map(fn, items):
    """Ordered map over items with the configured worker count."""
    workers = _worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _echo_config(out: Path, args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "run_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(FLOAT % v)
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out = fileio.ensure_dir(args.out)
    _echo_config(out, args)

    def build_pair(index: int) -> None:
        pair_seed = derived_seed(args.seed, index)
        kinds = (
            [SHAPE_KINDS[j % len(SHAPE_KINDS)] for j in range(args.compose)]
            if args.shape == "mixed"
            else [args.shape] * args.compose
        )
        shapes = [
            synth_shape(kind, 2 * args.n_points, derived_seed(pair_seed, j))
            for j, kind in enumerate(kinds)
        ]
        cfg = SynthConfig(
            seed=pair_seed,
            n_sample=args.n_points,
            n_partial=args.n_partial,
            rot_max_deg=args.rot_max_deg,
            trans_max=args.trans_max,
            compose_count=args.compose,
        )
        pair = make_cpu_pair(shapes, cfg)
        pair_dir = fileio.ensure_dir(out / f"pair_{index:04d}")
        fileio.save(pair_dir / "source.ply", pair.source)
        fileio.save(pair_dir / "target.ply", pair.target)
        fileio.save(pair_dir / "clean_source.ply", pair.clean_source)
        fileio.save(pair_dir / "clean_target.ply", pair.clean_target)
        fileio.save_transform(pair_dir / "gt.txt", pair.gt)

    _pool_map(build_pair, list(range(args.pairs)))
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def _load_pair(pair_dir: Path) -> RegistrationPair:
    source = fileio.load(pair_dir / "source.ply")
    target = fileio.load(pair_dir / "target.ply")
    gt = None
    if (pair_dir / "gt.txt").exists():
        gt = fileio.load_transform(pair_dir / "gt.txt")
    clean_s = clean_t = None
    if (pair_dir / "clean_source.ply").exists():
        clean_s = fileio.load(pair_dir / "clean_source.ply")
    if (pair_dir / "clean_target.ply").exists():
        clean_t = fileio.load(pair_dir / "clean_target.ply")
    return RegistrationPair(source, target, gt, clean_s, clean_t)


def cmd_register(args: argparse.Namespace) -> int:
    in_dir = Path(args.in_dir)
    pair_dirs = sorted(p for p in in_dir.glob("pair_*") if p.is_dir())
    if not pair_dirs:
        print(f"no pair_* directories under {in_dir}", file=sys.stderr)
        return 1
    out = fileio.ensure_dir(args.out)
    _echo_config(out, args)

    weights = None
    if args.weights:
        weights = np.loadtxt(args.weights, delimiter=",", ndmin=1)

    def run_pair(item):
        index, pair_dir = item
        pair = _load_pair(pair_dir)
        source, target = pair.source, pair.target
        if args.estimate_normals:
            k = args.estimate_normals
            flip = not args.consistent_normals
            source = estimate_normals(source, k, derived_seed(index, "src"), random_flip=flip)
            target = estimate_normals(target, k, derived_seed(index, "tgt"), random_flip=flip)
            pair = RegistrationPair(source, target, pair.gt, pair.clean_source, pair.clean_target)
        try:
            t0 = time.perf_counter()
            report = icp(
                source,
                target,
                method=args.method,
                max_outer=args.outer_iters,
                inner_iters=args.inner_iters,
                damping=args.damping,
                source_weights=weights,
            )
            fwd_ms = (time.perf_counter() - t0) * 1e3
            moved = apply_transform(report.transform, source)
            corr = nn_correspond(moved, target)
            t0 = time.perf_counter()
            backward(corr, moved, report.transform)
            bwd_ms = (time.perf_counter() - t0) * 1e3
        except (SingularSystem, np.linalg.LinAlgError, ValueError) as exc:
            return index, None, type(exc).__name__, pair
        fileio.save_transform(out / f"pair_{index:04d}_transform.txt", report.transform)
        return index, (report, fwd_ms, bwd_ms), "", pair

    results = _pool_map(run_pair, list(enumerate(pair_dirs)))

    header = [
        "case_id", "rot_res_x_deg", "rot_res_y_deg", "rot_res_z_deg", "geodesic_deg",
        "trans_res_x", "trans_res_y", "trans_res_z", "chamfer", "fwd_ms", "bwd_ms", "error",
    ]
    rows = []
    rot_res, gt_eulers, trans_res, gt_trans, chamfers = [], [], [], [], []
    failures = 0
    for index, payload, err, pair in results:
        if err:
            failures += 1
            rows.append([index] + [""] * 9 + ["", err])
            continue
        report, fwd_ms, bwd_ms = payload
        if pair.gt is not None:
            errs = rotation_errors(report.transform, pair.gt)
            tres = report.transform.translation - pair.gt.translation
            cd = chamfer(report.transform, pair)
            rot_res.append(errs.per_axis_deg)
            gt_eulers.append(euler_zyx_angles(pair.gt.rotation))
            trans_res.append(tres)
            gt_trans.append(pair.gt.translation)
            chamfers.append(cd)
            rows.append(
                [index, *errs.per_axis_deg, errs.geodesic_deg, *tres, cd, fwd_ms, bwd_ms, ""]
            )
        else:
            rows.append([index] + [""] * 8 + [fwd_ms, bwd_ms, ""])

    _write_csv(out / "metrics.csv", header, rows)
    if len(chamfers) >= 2:
        report = build_report(rot_res, gt_eulers, trans_res, gt_trans, chamfers)
        summary = {
            "cases": report.cases,
            "mse_r": report.rotation.mse,
            "rmse_r": report.rotation.rmse,
            "mae_r": report.rotation.mae,
            "r2_r": report.rotation.r2,
            "mse_t": report.translation.mse,
            "rmse_t": report.translation.rmse,
            "mae_t": report.translation.mae,
            "r2_t": report.translation.r2,
            "chamfer_mean": report.chamfer_mean,
        }
        (out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if failures and args.strict:
        return 2
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args: argparse.Namespace) -> int:
    out = fileio.ensure_dir(args.out)
    _echo_config(out, args)
    iters_list = [int(v) for v in str(args.iters).split(",") if v.strip()]

    def run_case(case: int):
        corr, cloud, gt = make_instance(derived_seed(args.seed, case), args.n, noise=args.noise)
        case_rows = []
        for n_iters in iters_list:
            rep = register_p2pl(corr, cloud, n_iters=n_iters)
            gv = to_gvector(rep.transform)
            bundle = backward(corr, cloud, gv)
            fd = fd_bundle(corr, cloud, FDConfig(step=args.fd_step, n_iters_forward=n_iters))
            _, dldg = rigid_motion_loss(gv, gt)
            err = compare(bundle, fd, dldg, n_iters)
            for kind in ("x", "y", "n", "zeta"):
                mse, rel = err.per_input[kind]
                case_rows.append([case, kind, mse, rel, n_iters])
            case_rows.append([case, "all", err.mse, err.rel_mse, n_iters])
        return case_rows

    all_rows = []
    for case_rows in _pool_map(run_case, list(range(args.cases))):
        all_rows.extend(case_rows)
    _write_csv(out / "gradcheck.csv", ["instance_id", "input_kind", "mse", "rel_mse", "n_iters"], all_rows)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _median_ms(fn, reps: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return int(peak)


def cmd_bench(args: argparse.Namespace) -> int:
    out = fileio.ensure_dir(args.out)
    _echo_config(out, args)
    iters_list = [int(v) for v in str(args.iters_list).split(",") if v.strip()]
    corr, cloud, _ = make_instance(0, args.n_points, noise=1e-4)

    rows = []
    for n_iters in iters_list:
        fwd = lambda: register_p2pl(corr, cloud, n_iters=n_iters)
        rows.append(["forward", n_iters, _median_ms(fwd, args.reps), _peak_bytes(fwd)])
        g = to_gvector(register_p2pl(corr, cloud, n_iters=n_iters).transform)
        bwd = lambda: backward(corr, cloud, g)
        rows.append(["backward_analytic", n_iters, _median_ms(bwd, args.reps), _peak_bytes(bwd)])

    # The oracle Jacobian needs ~2 (9 N + N) full solves per run, so it gets
    # a reduced repetition count; the compared magnitudes differ by orders.
    fd_reps = max(1, args.reps // 10)
    fd_iters = 10 if 10 in iters_list else iters_list[-1]
    fd = lambda: fd_bundle(corr, cloud, FDConfig(n_iters_forward=fd_iters))
    rows.append(["backward_fd_oracle", fd_iters, _median_ms(fd, fd_reps, warmup=0), _peak_bytes(fd)])

    _write_csv(out / "bench.csv", ["phase", "n_iters", "median_ms", "peak_bytes"], rows)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2pl",
        description="Point-to-plane registration kernel: synthesis, registration, "
        "gradient checks, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate compose/partial/unduplicated pairs")
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", choices=SHAPE_KINDS + ("mixed",), default="blob")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--n-partial", type=int, default=768)
    p.add_argument("--rot-max-deg", type=float, default=45.0)
    p.add_argument("--trans-max", type=float, default=0.5)
    p.add_argument("--compose", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="run ICP over a synthesized pair directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--method", choices=("p2p", "p2pl"), default="p2pl")
    p.add_argument("--inner-iters", type=int, default=10)
    p.add_argument("--outer-iters", type=int, default=30)
    p.add_argument("--weights", default="")
    p.add_argument("--estimate-normals", type=int, default=0, metavar="K")
    p.add_argument("--consistent-normals", action="store_true",
                   help="orient estimated normals outward instead of flipping randomly")
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to the FD oracle")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--iters", default="1,2,5,10")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time forward/backward phases and the FD oracle")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--iters-list", default="1,5,10,20")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
