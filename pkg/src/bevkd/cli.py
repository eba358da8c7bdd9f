"""Command-line entry point: ``bevkd <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 verification
failure. ``BEVKD_THREADS`` caps the BLAS/OpenMP thread count when set
before numpy is first imported.
"""

from __future__ import annotations

import os

_threads = os.environ.get("BEVKD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import io as bio  # noqa: E402
from .config import ConfigError, load_config  # noqa: E402
from .harness import (  # noqa: E402
    DEFAULT_LR,
    LOSS_IDS,
    DivergenceError,
    build_toy_problem,
    evaluate,
    finite_difference_audit,
    run_toy_distillation,
    summarize,
)
from .losses import rakd_loss, rdkd_loss_grid, select_confident_positions, tkd_loss  # noqa: E402
from .masks import build_rakd_mask, build_tkd_mask  # noqa: E402
from .synth import generate_scene  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_scene(args) -> int:
    scene = generate_scene(args.seed, args.objects, bounds=args.bounds)
    text = bio.dumps_scene(scene)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rasterize(args) -> int:
    cfg = load_config(args.config)
    scene = bio.read_scene(args.scene)
    build = build_rakd_mask if args.mode == "rakd" else build_tkd_mask
    mask = build(scene.boxes, cfg.grid, cfg)
    bio.write_mask(args.out, mask, dtype=args.dtype)
    if args.pgm:
        bio.write_pgm(args.pgm, mask.values)
    _emit({"mode": args.mode, "n_active_cells": mask.n_active, "max_value": float(mask.values.max())})
    return EXIT_OK


def _read_features(path):
    data, grid = bio.read_grid(path)
    return data.astype(float), grid


def cmd_loss(args) -> int:
    cfg = load_config(args.config)
    teacher, g_t = _read_features(args.teacher)
    student, g_s = _read_features(args.student)
    mask = bio.read_mask(args.mask)
    if g_t.shape != g_s.shape or g_t.shape != mask.grid.shape:
        raise ValueError(f"grid shapes differ: teacher {g_t.shape}, student {g_s.shape}, mask {mask.grid.shape}")
    if args.loss == "ra":
        lv = rakd_loss(teacher, student, mask, squared=cfg.rakd_squared)
        name = "L_RA"
    else:
        lv = tkd_loss(teacher, student, mask)
        name = "L_T"
    _emit(lv.report(name))
    return EXIT_OK


def cmd_affinity(args) -> int:
    cfg = load_config(args.config)
    teacher, _ = _read_features(args.teacher)
    student, _ = _read_features(args.student)
    scores, _ = _read_features(args.scores)
    if scores.shape[1:] != student.shape[1:]:
        raise ValueError(f"score map plane {scores.shape[1:]} does not match features {student.shape[1:]}")
    pos = select_confident_positions(scores, cfg.tau_cls, cfg.k_max)
    lv = rdkd_loss_grid(teacher, student, pos)
    report = lv.report("L_RD")
    report["k"] = int(len(pos))
    _emit(report)
    return EXIT_OK


def _write_snapshot(directory: Path, step: int, problem) -> None:
    from .losses import channel_project

    diff = problem.teacher_low - channel_project(problem.student_low, problem.proj_w, problem.proj_b)
    bio.write_pgm(directory / f"step_{step:05d}.pgm", np.sqrt(np.sum(diff * diff, axis=0)), scale=None)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    problem = build_toy_problem(cfg, args.seed)
    if args.snapshot_dir:
        snap = Path(args.snapshot_dir)
        snap.mkdir(parents=True, exist_ok=True)
        _write_snapshot(snap, 0, problem)
    try:
        trace = run_toy_distillation(cfg, args.seed, args.steps, args.lr, problem=problem)
    except DivergenceError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    if args.snapshot_dir:
        _write_snapshot(snap, args.steps, problem)
    Path(args.out).write_text(trace.to_json())
    _emit(summarize(trace))
    return EXIT_OK


def cmd_check_grads(args) -> int:
    corrupt = 1.01 if args.corrupt_grad else 1.0
    results = []
    ok = True
    for loss_id in LOSS_IDS:
        err = max(finite_difference_audit(loss_id, args.seed + i, eps=args.eps, corrupt=corrupt)
                  for i in range(args.seeds))
        passed = err < GRAD_TOLERANCE
        ok = ok and passed
        results.append({"loss_id": loss_id, "max_rel_error": err, "pass": passed})
    _emit({"seed": args.seed, "seeds": args.seeds, "tolerance": GRAD_TOLERANCE, "results": results, "pass": ok})
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_heatmap(args) -> int:
    data, _ = _read_features(args.grid)
    if args.minus:
        other, _ = _read_features(args.minus)
        if other.shape != data.shape:
            raise ValueError(f"shape mismatch: {data.shape} vs {other.shape}")
        data = data - other
    if args.channel is not None:
        if not 0 <= args.channel < data.shape[0]:
            raise UsageError(f"channel {args.channel} out of range for {data.shape[0]} channels")
        plane = data[args.channel]
    elif data.shape[0] == 1 and not args.minus:
        plane = data[0]
    else:
        plane = np.sqrt(np.sum(data * data, axis=0))
    bio.write_pgm(args.out, plane, scale=None if args.scale == "max" else 1.0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevkd", description="BEV cross-modal distillation masks, losses and toy training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-scene", help="write a seeded synthetic scene as JSON")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--objects", type=int, default=5)
    s.add_argument("--bounds", type=float, default=40.0)
    s.add_argument("--out", help="output path (default: stdout)")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("rasterize", help="build a RAKD or TKD distillation mask from a scene")
    s.add_argument("scene")
    s.add_argument("--mode", choices=("rakd", "tkd"), required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="binary grid output")
    s.add_argument("--pgm", help="optional PGM heatmap")
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("loss", help="evaluate L_RA or L_T on grid files")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--loss", choices=("ra", "t"), required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("affinity", help="evaluate L_RD on high-level grids and a class-score grid")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_affinity)

    s = sub.add_parser("train", help="run the toy distillation loop")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=DEFAULT_LR)
    s.add_argument("--out", required=True, help="trace JSON output")
    s.add_argument("--snapshot-dir", help="write |teacher - student| PGMs before and after training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("check-grads", help="finite-difference audit of all three losses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds per loss")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--corrupt-grad", action="store_true", help="negative control: perturb analytic gradients")
    s.set_defaults(func=cmd_check_grads)

    s = sub.add_parser("heatmap", help="render a grid file as a PGM heatmap")
    s.add_argument("grid")
    s.add_argument("--out", required=True)
    s.add_argument("--minus", help="subtract this grid first (e.g. teacher minus student)")
    s.add_argument("--channel", type=int)
    s.add_argument("--scale", choices=("unit", "max"), default="max")
    s.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("steps", "seeds", "objects"):
        if getattr(args, name, 1) < (0 if name == "objects" else 1):
            print(f"bevkd: --{name} is out of range", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bevkd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (bio.FormatError, ConfigError, ValueError, OSError) as exc:
        print(f"bevkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
