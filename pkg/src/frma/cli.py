"""Command line entry point: ``frma <subcommand> [options]``.

All tabular output is CSV, written to ``--out`` or stdout. The config file
comes from ``--config`` or, failing that, the ``FRMA_CONFIG`` environment
variable; command line flags override it.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import IO, Iterator

from frma.analytic import AccessScheme, sweep, write_sweep_csv
from frma.config import ConfigError, ExperimentConfig, load_config
from frma.experiments import (
    PAPER_PRETRAIN_STEPS,
    fairness_timeseries,
    gradient_check,
    pretrain,
    run_experiment,
    sweep_stations,
    write_rows,
)

GRADCHECK_TOL = 1e-4


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.duration_s is not None:
        changes["duration_us"] = args.duration_s * 1e6
    if args.scheme is not None:
        changes["scheme"] = args.scheme
    if args.no_fl:
        changes["fl_enabled"] = False
    if getattr(args, "n", None) is not None:
        changes["n_stations"] = args.n
    if getattr(args, "checkpoint", None) is not None:
        changes["pretrain_checkpoint"] = args.checkpoint
    if getattr(args, "window", None) is not None:
        changes["window_slots"] = args.window
    return cfg.replace(**changes)


def cmd_analytic_sweep(args) -> int:
    cfg = _config(args)
    schemes = [AccessScheme.parse(args.scheme)] if args.scheme in ("basic", "rts") else list(AccessScheme)
    rows = sweep(args.n_list, cfg.phy, cfg.backoff, schemes)
    with _output(args.out) as fh:
        write_sweep_csv(rows, fh)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.n_list:
        rows = sweep_stations(cfg, args.n_list, include_frma=not args.skip_frma)
    else:
        rows = run_experiment(cfg)
    with _output(args.out) as fh:
        write_rows(rows, fh)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out_dir = args.out or "pretrained"
    with contextlib.ExitStack() as stack:
        log_fh = stack.enter_context(open(args.log, "w", newline="")) if args.log else None
        path = pretrain(cfg, out_dir, args.steps, allow_short=args.allow_short, log_fh=log_fh)
    print(path)
    return 0


def cmd_fairness(args) -> int:
    cfg = _config(args)
    series = fairness_timeseries(cfg, trial=args.trial)
    with _output(args.out) as fh:
        series.write(fh)
    j = series.final_jain()
    logging.getLogger("frma").info("final-window Jain index: %s", "n/a" if j is None else f"{j:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = gradient_check(seed, args.nets, args.states)
    with _output(args.out) as fh:
        fh.write("net,state,max_rel_err\n")
        for i, j, e in rows:
            fh.write(f"{i},{j},{e:.6e}\n")
    worst = max(e for *_, e in rows)
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'})", file=sys.stderr)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $FRMA_CONFIG)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--trials", type=int)
    common.add_argument("--duration-s", type=float, help="simulated seconds per trial")
    common.add_argument("--scheme", choices=["basic", "rts", "frma", "analytic"])
    common.add_argument("--no-fl", action="store_true", help="disable federated averaging")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="frma", description="802.11 DCF and federated RL medium access simulator")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analytic-sweep", parents=[common], help="saturation throughput model over n")
    a.add_argument("--n-list", type=_int_list, default=list(range(1, 51)), help="e.g. 1-50 or 1,5,10")
    a.set_defaults(func=cmd_analytic_sweep)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo trials, or a station sweep with --n-list")
    s.add_argument("--n", type=int, help="number of stations")
    s.add_argument("--n-list", type=_int_list, help="sweep all schemes over these station counts")
    s.add_argument("--skip-frma", action="store_true", help="leave FRMA out of a sweep")
    s.add_argument("--checkpoint", help="pre-trained checkpoint file or directory for FRMA")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("pretrain", parents=[common], help="train five FRMA stations and save checkpoints")
    t.add_argument("--steps", type=int, default=PAPER_PRETRAIN_STEPS)
    t.add_argument("--allow-short", action="store_true", help=f"accept fewer than {PAPER_PRETRAIN_STEPS} steps")
    t.add_argument("--log", help="per-station training log CSV")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("fairness", parents=[common], help="windowed per-station FRMA throughput")
    f.add_argument("--n", type=int)
    f.add_argument("--window", type=int, help="window length in slots")
    f.add_argument("--trial", type=int, default=0)
    f.add_argument("--checkpoint")
    f.set_defaults(func=cmd_fairness)

    g = sub.add_parser("gradcheck", parents=[common], help="backprop vs finite differences")
    g.add_argument("--nets", type=int, default=10)
    g.add_argument("--states", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
