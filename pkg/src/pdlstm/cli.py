"""Command-line front end: ``pdlstm <command> [options]``.

Failures print ``error[<category>]: <message>`` on one stderr line and exit
with 2 (config / shape), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericError, PdlstmError, ShapeError
from .grid import Field, FieldSequence, read_sequence, write_sequence
from .metrics import relative_l2_error, render_field, write_eval_csv, write_loss_plot_csv
from .network import predict
from .pddo import build_filter_set, orthogonality_defect, read_filters, write_filters
from .physics import gray_scott_ic, lambda_omega_ic, sample_burgers_ic
from .reference import SolveConfig, solve
from .trainer import LossHistory, Trainer, load_checkpoint

log = logging.getLogger("pdlstm")

DEFAULT_IC = {"burgers": "grf", "gray_scott": "spots", "lambda_omega": "spiral"}
ORTHOGONALITY_TOL = 1e-9


def _dump_config(cfg: RunConfig, out) -> None:
    Path(str(out) + ".config.json").write_text(cfg.dumps())


def _read_seq(path, cfg: RunConfig) -> FieldSequence:
    return read_sequence(path, cfg.grid.x_min, cfg.grid.x_max)


def _read_ic(path, cfg: RunConfig) -> Field:
    ic = _read_seq(path, cfg)[0]
    if ic.grid.n != cfg.grid.n:
        raise ShapeError(f"initial condition is {ic.grid.n}x{ic.grid.n} but the config grid is n={cfg.grid.n}")
    return ic


def make_ic(cfg: RunConfig, seed: int | None = None) -> Field:
    grid = cfg.make_grid()
    seed = cfg.ic.seed if seed is None else seed
    kind = DEFAULT_IC[cfg.pde.kind] if cfg.ic.kind == "auto" else cfg.ic.kind
    if kind == "grf":
        return sample_burgers_ic(seed, grid)
    if kind == "spots":
        return gray_scott_ic(grid, seed=seed)
    return lambda_omega_ic(grid)


# --- commands -----------------------------------------------------------------------


def cmd_filters_gen(args, cfg: RunConfig) -> None:
    dx = args.dx if args.dx is not None else cfg.make_grid().dx
    m = args.m if args.m is not None else cfg.filter.m
    factor = args.horizon_factor if args.horizon_factor is not None else cfg.filter.horizon_factor
    filters = build_filter_set(m, dx, factor)
    write_filters(filters, args.out)
    _dump_config(cfg, args.out)
    print(f"wrote {args.out}: m={filters.m} dx={dx!r} max orthogonality defect {orthogonality_defect(filters):.3e}")


def cmd_filters_check(args, cfg: RunConfig) -> None:
    filters = read_filters(args.filters)
    defect = orthogonality_defect(filters)
    print(f"max orthogonality defect {defect:.3e} (m={filters.m}, dx={filters.dx!r})")
    if not defect <= ORTHOGONALITY_TOL:
        raise NumericError(f"orthogonality defect {defect:.3e} exceeds {ORTHOGONALITY_TOL:g}")


def cmd_ic_sample(args, cfg: RunConfig) -> None:
    ic = make_ic(cfg, args.seed)
    write_sequence(FieldSequence([ic], cfg.train.dt), args.out)
    _dump_config(cfg, args.out)
    print(f"wrote {args.out}: n={ic.grid.n} std={np.std(ic.data):.4g}")


def cmd_ref_solve(args, cfg: RunConfig) -> None:
    if args.pde is not None and args.pde != cfg.pde.kind:
        raise ConfigError(f"--pde {args.pde} disagrees with config pde.kind {cfg.pde.kind}")
    ic = _read_ic(args.ic, cfg)
    ref = cfg.reference
    t_end = ref.t_end if args.t_end is None else args.t_end
    grid = cfg.make_grid()
    filters = build_filter_set(cfg.filter.m, grid.dx, cfg.filter.horizon_factor)
    seq = solve(SolveConfig(cfg.pde_spec(), grid, t_end, ref.dt_ref, ref.save_every, filters), ic)
    write_sequence(seq, args.out)
    _dump_config(cfg, args.out)
    print(f"wrote {args.out}: {len(seq)} frames, dt={seq.dt!r}")


def cmd_train(args, cfg: RunConfig) -> None:
    if args.epochs is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": args.epochs})})
    ic = _read_ic(args.ic, cfg)
    trainer = Trainer(cfg.train_config())
    start = time.time()

    def progress(epoch, out, lat, total, lr):
        log.info("epoch %d  output %.4e  latent %.4e  total %.4e  lr %.3e  (%.0fs)",
                 epoch, out, lat, total, lr, time.time() - start)

    _, history = trainer.fit(ic, checkpoint_path=args.out, progress=progress)
    history_path = args.history or str(args.out) + ".loss.csv"
    history.write_csv(history_path)
    _dump_config(cfg, args.out)
    final = f"{history.rows[-1][3]:.4e}" if len(history) else "n/a"
    print(f"wrote {args.out} and {history_path}: {len(history)} epochs, final total loss {final}")


def cmd_predict(args, cfg: RunConfig) -> None:
    params = load_checkpoint(args.checkpoint)
    ic = _read_ic(args.ic, cfg)
    if params.n != ic.grid.n:
        raise ShapeError(f"checkpoint expects n={params.n}, initial condition has n={ic.grid.n}")
    steps = args.steps if args.steps is not None else cfg.train.steps + cfg.eval.extrapolation_steps
    seq = predict(ic, steps, params)
    write_sequence(seq, args.out)
    print(f"wrote {args.out}: {len(seq)} frames, dt={seq.dt!r}")


def cmd_eval(args, cfg: RunConfig) -> None:
    pred, truth = _read_seq(args.pred, cfg), _read_seq(args.truth, cfg)
    if args.frames is not None:
        if args.frames < 1 or args.frames > min(len(pred), len(truth)):
            raise ShapeError(f"--frames {args.frames} outside 1..{min(len(pred), len(truth))}")
        pred = FieldSequence(pred.fields[: args.frames], pred.dt)
        truth = FieldSequence(truth.fields[: args.frames], truth.dt)
    result = relative_l2_error(pred, truth)
    write_eval_csv(result, args.out)
    print(f"wrote {args.out}: aggregate relative L2 {result.aggregate:.4e} over {len(result.per_step)} steps")


def cmd_plot_loss(args, cfg: RunConfig) -> None:
    history = LossHistory.read_csv(args.history)
    write_loss_plot_csv(history.rows, args.out)
    print(f"wrote {args.out}: {len(history)} epochs")


def cmd_plot_field(args, cfg: RunConfig) -> None:
    seq = _read_seq(args.seq, cfg)
    if not 0 <= args.frame < len(seq):
        raise ConfigError(f"frame {args.frame} outside 0..{len(seq) - 1}")
    render_field(seq[args.frame], args.channel, args.out)
    print(f"wrote {args.out}")


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdlstm", description="Physics-residual ConvLSTM toolkit with PDDO filters.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(parent, name, func, help_):
        sp = parent.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        sp.set_defaults(func=func)
        return sp

    filters = sub.add_parser("filters", help="derivative filter files").add_subparsers(dest="action", required=True)
    sp = add(filters, "gen", cmd_filters_gen, "build PDDO filters and write a PDFLT1 file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--m", type=int, help="override family half-width")
    sp.add_argument("--dx", type=float, help="override grid spacing")
    sp.add_argument("--horizon-factor", type=float, help="override horizon / dx")
    sp = add(filters, "check", cmd_filters_check, "verify the orthogonality identities of a filter file")
    sp.add_argument("--in", "--filters", dest="filters", required=True)

    ic = sub.add_parser("ic", help="initial conditions").add_subparsers(dest="action", required=True)
    sp = add(ic, "sample", cmd_ic_sample, "sample a seeded initial condition")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    ref = sub.add_parser("ref", help="reference solver").add_subparsers(dest="action", required=True)
    sp = add(ref, "solve", cmd_ref_solve, "integrate an initial condition with RK4")
    sp.add_argument("--ic", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pde", choices=sorted(DEFAULT_IC))
    sp.add_argument("--t-end", type=float)

    sp = add(sub, "train", cmd_train, "train a model on one initial condition")
    sp.add_argument("--ic", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--history", help="loss CSV path (default <out>.loss.csv)")
    sp.add_argument("--epochs", type=int)

    sp = add(sub, "predict", cmd_predict, "roll out a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ic", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, help="default: training steps + extrapolation steps")

    sp = add(sub, "eval", cmd_eval, "relative L2 error of a prediction against a reference")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, help="compare only the leading frames")

    plot = sub.add_parser("plot", help="static plot artifacts").add_subparsers(dest="action", required=True)
    sp = add(plot, "loss", cmd_plot_loss, "log-scale loss curves as CSV")
    sp.add_argument("--history", required=True)
    sp.add_argument("--out", required=True)
    sp = add(plot, "field", cmd_plot_field, "render one channel of one frame as PGM")
    sp.add_argument("--seq", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "predict" and getattr(args, "steps", None) is not None and args.steps < 0:
            raise ConfigError(f"--steps must be non-negative, got {args.steps}")
        args.func(args, cfg)
    except PdlstmError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
