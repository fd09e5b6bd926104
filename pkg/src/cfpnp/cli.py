"""Command-line entry point: ``cfpnp {register,toymodel,ablation,ambiguity,gen-scene}``.

Exit codes: 0 success, 1 usage/parse/configuration error, 2 degenerate
registration.  Every output file carries the resolved configuration and
seed.  Wall-clock timings are kept out of result files (so that reruns are
byte-identical) and written to ``timing.json``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io
from .dynaweight import AlternationConfig, SubsetStrategy
from .errors import ConfigurationError, CutLocusError, PreconditionError
from .experiments import (
    ABLATION_LEVELS,
    AMBIGUITY_RATIOS,
    TOY_COUNTS,
    AblationConfig,
    AmbiguityConfig,
    Solver,
    ToyConfig,
    run_ablation,
    run_ambiguity,
    run_solver,
    run_toymodel,
)
from .liegeo import project_points
from .metrics import report
from .objectives import KernelConfig
from .solvers import IterationRecord, SolverConfig, Termination
from .spatial import build_index
from .synthlab import DisturbanceSpec, make_square_scene, make_tree_scene, perturb_pose, prune_branches

EXIT_OK, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2
DEFAULT_XI = AlternationConfig().tre_threshold
TIMING_KEY = "runtime_ms"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return conv


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _level(text):
    try:
        mm, deg = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MM,DEG, got {text!r}") from None
    if mm < 0 or deg < 0:
        raise argparse.ArgumentTypeError("disturbance levels must be non-negative")
    return (mm, deg)


def _common(p, seed=True, trials=None):
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (created)")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    if trials is not None:
        p.add_argument("--trials", type=_positive(int), default=trials)
    p.add_argument("--single-thread", action="store_true", help="pin numba/BLAS to one thread")


def _kernel_flags(p):
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, default=KernelConfig.lam,
                   help="pose prior weight")
    p.add_argument("--ell-floor", type=_positive(float), default=KernelConfig.ell_floor,
                   help="smallest kernel bandwidth in pixels")


def build_parser() -> argparse.ArgumentParser:
    solvers = [s.value for s in Solver]
    parser = _Parser(prog="cfpnp", description="Correspondence-free 3D-2D registration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="register a 3D point file to a 2D point file")
    p.add_argument("scene", type=Path, help="scene manifest (scene.json) written by gen-scene")
    p.add_argument("--source", type=Path, help="override the manifest's 3D point file")
    p.add_argument("--targets", type=Path, help="override the manifest's 2D point file")
    p.add_argument("--solver", choices=solvers, default=Solver.RKHS_IRLS.value)
    p.add_argument("--xi", type=_positive(float), default=DEFAULT_XI, help="alternation TRE threshold (px)")
    p.add_argument("--subset", choices=[s.value for s in SubsetStrategy], default=SubsetStrategy.GRAPH_NODES.value)
    _kernel_flags(p)
    _common(p)

    p = sub.add_parser("toymodel", help="square toy model table")
    p.add_argument("--counts", type=_positive(int), nargs="+", default=list(TOY_COUNTS))
    p.add_argument("--solver", choices=solvers, action="append",
                   help="repeatable; default dticp_squared and rkhs_irls")
    p.add_argument("--radius", type=_nonneg_float, default=1.0)
    _kernel_flags(p)
    _common(p, trials=10)

    p = sub.add_parser("ablation", help="tree disturbance / pruning ablation table")
    p.add_argument("--levels", type=_level, nargs="+", default=list(ABLATION_LEVELS), metavar="MM,DEG")
    p.add_argument("--prune-leaves", type=int, default=0)
    p.add_argument("--branches", type=int, default=8)
    p.add_argument("--solver", choices=solvers, action="append",
                   help="repeatable; default rkhs_irls and dynaweight")
    p.add_argument("--xi", type=_positive(float), default=DEFAULT_XI, help="alternation TRE threshold (px)")
    _kernel_flags(p)
    _common(p, trials=20)

    p = sub.add_parser("ambiguity", help="rotation/translation duality sweep")
    p.add_argument("--ratios", type=float, nargs="+", default=list(AMBIGUITY_RATIOS))
    p.add_argument("--translation", type=float, nargs=3, default=[0.5, 0.0, 0.0], metavar=("TX", "TY", "TZ"))
    p.add_argument("--count", type=_positive(int), default=44, help="square edge point count")
    _common(p, seed=False)

    p = sub.add_parser("gen-scene", help="write a synthetic scene (point files + manifest)")
    p.add_argument("--kind", choices=("square", "tree"), default="tree")
    p.add_argument("--count", type=_positive(int), default=44, help="square edge point count")
    p.add_argument("--branches", type=int, default=8)
    p.add_argument("--points", type=int, default=2000, help="tree point count")
    p.add_argument("--prune-leaves", type=int, default=0)
    p.add_argument("--sigma-translation", type=_nonneg_float, default=0.0)
    p.add_argument("--sigma-angle", type=_nonneg_float, default=0.0, help="degrees")
    _common(p)
    return parser


# ---------------------------------------------------------------- helpers


def _pin_threads():
    # the compiled kernels are serial; this pins BLAS used by numpy.linalg
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = "1"


def _header(command: str, args: argparse.Namespace, config) -> dict:
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "out_dir", "single_thread")}
    return {"command": command, "seed": getattr(args, "seed", None), "cli": cli, "config": config}


def _split_timing(rows: list[dict]) -> tuple[list[dict], list[float]]:
    return [{k: v for k, v in r.items() if k != TIMING_KEY} for r in rows], [r[TIMING_KEY] for r in rows]


def _write_table(path: Path, rows: list[dict], header: dict) -> None:
    cols = list(rows[0]) if rows else []
    io.write_csv(path, cols, [[r[c] for c in cols] for r in rows], comment=header)


def _kernel(args) -> KernelConfig:
    return KernelConfig(lam=args.lam, ell_floor=args.ell_floor)


# ---------------------------------------------------------------- commands


def cmd_register(args) -> int:
    manifest = io.load_json(args.scene)
    base = args.scene.parent
    try:
        src_path = args.source or base / manifest["source"]
        tgt_path = args.targets or base / manifest["targets"]
        camera = io.camera_from_dict(manifest["camera"])
        T0 = io.pose_from_dict(manifest["initial_pose"])
    except KeyError as exc:
        raise ConfigurationError(f"{args.scene}: manifest is missing {exc.args[0]!r}") from None
    truth = io.pose_from_dict(manifest["ground_truth"]) if manifest.get("ground_truth") else None
    src, labels = io.read_points(src_path, 3)
    tgt, _ = io.read_points(tgt_path, 2)
    index = build_index(tgt)
    kcfg = _kernel(args)
    scfg = SolverConfig()
    acfg = AlternationConfig(tre_threshold=args.xi, subset_strategy=args.subset)
    result, alt = run_solver(args.solver, src, index, camera, T0, kcfg, scfg, acfg, labels)

    truth_uv = None
    if truth is not None:
        truth_uv = project_points(truth, src, camera)[0]
    metrics = replace(report(result.pose, src, camera, index, truth, truth_uv), runtime_ms=np.nan)
    header = _header("register", args, {"kernel": kcfg, "solver": scfg, "alternation": acfg,
                                         "source": str(src_path), "targets": str(tgt_path)})
    out = dict(header)
    out["result"] = {
        "pose": result.pose,
        "initial_pose": T0,
        "termination": result.termination,
        "iterations": result.iterations,
        "metrics": metrics.to_dict(),
        "trace": result.trace,
        "alternations": alt.records if alt is not None else [],
        "alternation_initial_tre": alt.initial_tre if alt is not None else None,
    }
    args.out_dir.mkdir(parents=True, exist_ok=True)
    io.dump_json(args.out_dir / "result.json", out)
    cols = [f.name for f in fields(IterationRecord)]
    io.write_csv(args.out_dir / "trace.csv", cols,
                 [[getattr(r, c) for c in cols] for r in result.trace], comment=header)
    io.dump_json(args.out_dir / "timing.json", {**header, "wall_time_ms": result.wall_time_ms})
    if result.termination is Termination.DEGENERATE:
        print("error: registration terminated on degenerate geometry", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_toymodel(args) -> int:
    cfg = ToyConfig(
        edge_counts=tuple(args.counts),
        trials=args.trials,
        seed=args.seed,
        solvers=tuple(args.solver) if args.solver else ToyConfig.solvers,
        radius=args.radius,
        kernel=_kernel(args),
    )
    rows, times = _split_timing(run_toymodel(cfg))
    header = _header("toymodel", args, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(args.out_dir / "toymodel.csv", rows, header)
    # wide layout: one row per solver, a TRE/Angle/Dist group per count
    wide_cols = ["solver"] + [f"{m}_{n}" for n in cfg.edge_counts for m in ("tre", "angle", "dist")]
    wide = []
    for s in cfg.solvers:
        by_n = {r["count"]: r for r in rows if r["solver"] == s}
        wide.append([s] + [by_n[n][m] for n in cfg.edge_counts for m in ("tre", "angle", "dist")])
    io.write_csv(args.out_dir / "toymodel_table.csv", wide_cols, wide, comment=header)
    io.dump_json(args.out_dir / "toymodel.json", {**header, "rows": rows})
    io.dump_json(args.out_dir / "timing.json", {**header, "total_runtime_ms": times})
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = AblationConfig(
        levels=tuple(args.levels),
        trials=args.trials,
        seed=args.seed,
        prune_leaves=args.prune_leaves,
        branches=args.branches,
        solvers=tuple(args.solver) if args.solver else AblationConfig.solvers,
        kernel=_kernel(args),
        alternation=AlternationConfig(tre_threshold=args.xi),
    )
    out = run_ablation(cfg)
    summary, s_times = _split_timing(out.summary)
    trials, t_times = _split_timing(out.trials)
    header = _header("ablation", args, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(args.out_dir / "ablation.csv", summary, header)
    _write_table(args.out_dir / "ablation_trials.csv", trials, header)
    io.dump_json(args.out_dir / "ablation.json", {**header, "summary": summary, "trials": trials})
    io.dump_json(args.out_dir / "timing.json",
                 {**header, "median_runtime_ms": s_times, "trial_runtime_ms": t_times})
    for r in summary:
        print(f"{r['sigma_translation']:g}mm,{r['sigma_angle']:g}deg {r['solver']:<14} "
              f"targets={r['mean_targets']:.0f} tre={r['tre']:.3f} angle={r['angle']:.3f} dist={r['dist']:.3f}")
    return EXIT_OK


def cmd_ambiguity(args) -> int:
    cfg = AmbiguityConfig(depth_ratios=tuple(args.ratios), translation=tuple(args.translation),
                          edge_point_count=args.count)
    rows = run_ambiguity(cfg)
    header = _header("ambiguity", args, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(args.out_dir / "ambiguity.csv", rows, header)
    io.dump_json(args.out_dir / "ambiguity.json", {**header, "rows": rows})
    for r in rows:
        if r["error"]:
            print(f"ratio {r['depth_ratio']:g}: {r['error']}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    if args.kind == "square":
        scene = make_square_scene(args.count)
        gen = {"kind": "square", "edge_point_count": args.count}
    else:
        scene = make_tree_scene(args.branches, seed=args.seed, n_points=args.points)
        gen = {"kind": "tree", "branches": args.branches, "n_points": args.points}
    scene = prune_branches(scene, args.prune_leaves, args.seed)
    spec = DisturbanceSpec(args.sigma_translation, args.sigma_angle)
    T0 = perturb_pose(scene.ground_truth_pose, spec, args.seed)
    header = _header("gen-scene", args, {"generator": gen, "disturbance": spec,
                                          "prune_leaves": args.prune_leaves})
    args.out_dir.mkdir(parents=True, exist_ok=True)
    io.write_points(args.out_dir / "source.txt", scene.source3d, scene.labels, header="x y z label")
    io.write_points(args.out_dir / "targets.txt", scene.targets2d, header="u v")
    manifest = {
        **header,
        "source": "source.txt",
        "targets": "targets.txt",
        "camera": io.camera_to_dict(scene.camera),
        "ground_truth": scene.ground_truth_pose,
        "initial_pose": T0,
        "target_source": scene.target_source,
    }
    io.dump_json(args.out_dir / "scene.json", manifest)
    return EXIT_OK


COMMANDS = {
    "register": cmd_register,
    "toymodel": cmd_toymodel,
    "ablation": cmd_ablation,
    "ambiguity": cmd_ambiguity,
    "gen-scene": cmd_gen_scene,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.single_thread:
        _pin_threads()
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, PreconditionError, CutLocusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
