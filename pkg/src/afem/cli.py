"""Command-line entry points.

Exit codes: 0 success, 1 usage, 2 IO/parse, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

from .errors import AfemError, DatasetFormatError, DivergenceError
from .io import read_checkpoint, read_dataset, write_checkpoint, write_dataset, write_report
from .nn import ModelConfig, init_params
from .pipeline import GenConfig, InverseProblem, TrainConfig, TrainState, evaluate, generate_dataset, train
from .verify import manufactured_convergence, run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("afem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def cmd_generate(args) -> int:
    cfg = GenConfig(
        n_train=args.n_train, n_test=args.n_test, nx=args.nx, ny=args.ny, noise=args.noise,
        seed=args.seed, n_modes=args.modes, sigma_kappa=args.sigma, decay=args.decay,
    )
    ds = generate_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test samples on a {cfg.nx}x{cfg.ny} mesh to {args.out}")
    return EXIT_OK


def _metrics_logger(path):
    fh = open(path, "w") if path else None

    def emit(state: TrainState, wall: float):
        line = f"{state.epoch} {state.history[-1]:.12e} {wall:.3f}"
        print(line, flush=True)
        if fh:
            fh.write(line + "\n")
            fh.flush()

    return emit, fh


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    tcfg = TrainConfig(
        alpha=args.alpha, lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        checkpoint_every=args.ckpt_every,
    )
    grid = ds.mesh.grid_shape
    resume = None
    if args.resume:
        resume, _ = read_checkpoint(args.resume)
        if resume.params.config.grid_shape not in (None, grid):
            raise UsageError(f"checkpoint grid {resume.params.config.grid_shape} does not match dataset grid {grid}")
        params = resume.params
    else:
        params = init_params(ModelConfig(grid_shape=grid), args.seed)

    extra = {"train": tcfg.to_dict(), "data": str(args.data)}
    emit, fh = _metrics_logger(args.log)

    def on_epoch(state: TrainState, wall: float):
        emit(state, wall)
        if tcfg.checkpoint_every and state.epoch and state.epoch % tcfg.checkpoint_every == 0:
            write_checkpoint(state, args.ckpt_out, extra)

    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        state = train(params, ds, tcfg, resume=resume, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        state = exc.last_good
        code = EXIT_NUMERIC
    finally:
        if fh:
            fh.close()
    if state is not None:
        write_checkpoint(state, args.ckpt_out, extra)
    if args.report_out and state is not None:
        write_report({
            "command": "train",
            "version": _version(),
            "model": state.params.config.to_dict(),
            "train_config": tcfg.to_dict(),
            "gen_config": ds.config.to_dict(),
            "seeds": {"model": state.params.seed, "shuffle": tcfg.seed, "data": ds.config.seed},
            "epochs_completed": state.epoch,
            "loss_history": state.history,
            "diverged": code != EXIT_OK,
            "wall_time_s": time.perf_counter() - t0,
        }, args.report_out)
    return code


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    state, extra = read_checkpoint(args.ckpt)
    config = state.params.config
    if config.grid_shape is not None and config.grid_shape != ds.mesh.grid_shape:
        raise UsageError(f"checkpoint expects grid {config.grid_shape}, dataset mesh gives {ds.mesh.grid_shape}")
    t0 = time.perf_counter()
    r = evaluate(state.params, ds.split(args.split), InverseProblem.from_dataset(ds))
    print(f"R ({args.split}, {len(ds.split(args.split))} samples) = {100 * r:.2f}%")
    if args.report_out:
        write_report({
            "command": "eval",
            "version": _version(),
            "split": args.split,
            "n_samples": len(ds.split(args.split)),
            "R": r,
            "model": config.to_dict(),
            "gen_config": ds.config.to_dict(),
            "seeds": {"model": state.params.seed, "data": ds.config.seed},
            "epochs_trained": state.epoch,
            "loss_history": state.history,
            "wall_time_s": time.perf_counter() - t0,
        }, args.report_out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = run_gradcheck(args.nx, args.ny, args.seed, corrupt=1.01 if args.inject_bug else 1.0)
    for c in checks:
        print(c.row())
    ok = all(c.passed for c in checks)
    print("all checks passed" if ok else "GRADIENT CHECK FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def _levels(text: str) -> list[int]:
    try:
        levels = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid level list {text!r}")
    if len(levels) < 2 or min(levels) < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise argparse.ArgumentTypeError("need at least two increasing positive levels, e.g. 8,16,32")
    return levels


def cmd_convergence(args) -> int:
    errors, orders = manufactured_convergence(args.levels)
    print(f"{'n':>6} {'L2 error':>14} {'order':>8}")
    for i, (n, e) in enumerate(zip(args.levels, errors)):
        o = f"{orders[i - 1]:8.3f}" if i else f"{'-':>8}"
        print(f"{n:>6} {e:14.6e} {o}")
    ok = all(o >= 1.9 for o in orders)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afem", description="Differentiable P1 heat-equation solver and inverse-problem pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--nx", type=int, default=16)
    g.add_argument("--ny", type=int, default=16)
    g.add_argument("--n-train", type=int, default=50)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--noise", type=float, default=0.01, help="noise std relative to rms(u)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--modes", type=int, default=8)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--decay", type=float, default=1.0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the CNN on a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ckpt-out", type=Path, required=True)
    t.add_argument("--report-out", type=Path)
    t.add_argument("--ckpt-every", type=int, default=0)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.add_argument("--log", type=Path, help="plain-text metrics log (epoch, mean loss, wall time)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate the relative error R")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--report-out", type=Path)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference and Taylor checks of all tape operators")
    c.add_argument("--nx", type=int, default=8)
    c.add_argument("--ny", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("convergence", help="manufactured-solution convergence study")
    v.add_argument("--levels", type=_levels, default=[8, 16, 32, 64])
    v.set_defaults(func=cmd_convergence)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"afem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetFormatError, json.JSONDecodeError) as exc:
        print(f"afem: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AfemError, ArithmeticError, ValueError) as exc:
        print(f"afem: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
