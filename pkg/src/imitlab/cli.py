"""Command-line runner: ``imitlab {train,study,eval,replay}``.

Every output file starts with a header line carrying the package version and
the config digest. No randomness is drawn outside the config (or --seed) seed.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .core import TRAJECTORY_LOG_FIELDS, parse_trajectory_line
from .env import EnvError
from .metrics import KL_CONVENTION, write_study_csv
from .policy import CheckpointError, SoftmaxPolicy, load_params
from .studies import horizon_scaling_study, median_curve, sample_scaling_curve
from .trainer import Trainer, header_line


class CliError(Exception):
    pass


def _load(args) -> tuple[ExperimentConfig, int, Path]:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        raise CliError(f"{args.config}: {e}") from e
    except OSError as e:
        raise CliError(f"cannot read config: {e}") from e
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out if args.out is not None else cfg.output_dir)
    return cfg, seed, out


def cmd_train(args) -> int:
    cfg, seed, out = _load(args)
    result = Trainer(cfg, seed, args.workers).run(out)
    f = result.final
    print(f"{cfg.experiment_id}: {len(result.history)} iterations, "
          f"greedy resolution {f.greedy_resolution_rate:.4f}, reverse KL {f.reverse_kl:.6g}")
    print(f"outputs written to {out}")
    return 0


def cmd_study(args) -> int:
    cfg, seed, out = _load(args)
    st = cfg.study
    seeds = [seed + s for s in st.seeds]
    out.mkdir(parents=True, exist_ok=True)
    header = header_line(cfg, seed)
    if args.kind == "horizon":
        study = horizon_scaling_study(cfg, st.methods, st.horizons, seeds, st.budget, args.workers)
        with open(out / "horizon_study.csv", "w", newline="") as fh:
            write_study_csv(fh, study.rows, header)
        with open(out / "horizon_summary.csv", "w", newline="") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method", "horizon", "mean_failure", "std_failure", "median_reverse_kl", "fitted_slope"))
            for s in study.summary:
                w.writerow((s.method, s.horizon, f"{s.mean_failure:.12g}", f"{s.std_failure:.12g}",
                            f"{s.median_reverse_kl:.12g}", f"{study.slopes[s.method]:.12g}"))
        for s in study.summary:
            print(f"{s.method:>16} T={s.horizon:<4d} failure {s.mean_failure:.4f} ± {s.std_failure:.4f}")
        for m, slope in study.slopes.items():
            print(f"{m:>16} log-log slope {slope:.4f}")
    else:
        rows = []
        for method in st.methods:
            rows += sample_scaling_curve(cfg, method, st.budgets, seeds, args.workers)
        with open(out / "scaling_study.csv", "w", newline="") as fh:
            write_study_csv(fh, rows, header)
        for method in st.methods:
            curve = median_curve([r for r in rows if r.method == method])
            print(f"{method:>16} " + "  ".join(f"{b}:{v:.3f}" for b, v in curve.items()))
    print(f"outputs written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg, seed, out = _load(args)
    try:
        with open(args.checkpoint) as fh:
            params = load_params(fh)
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}") from e
    except CheckpointError as e:
        raise CliError(f"{args.checkpoint}: {e}") from e
    trainer = Trainer(cfg, seed, args.workers)
    try:
        SoftmaxPolicy(params, trainer.env)
    except ValueError as e:
        raise CliError(f"{args.checkpoint}: {e}") from e
    rate, kl, n_inf = trainer.evaluate(params, 0)
    print(f"greedy resolution rate {rate:.6g} on {len(trainer.heldout)} held-out instances")
    print(f"reverse KL {kl:.6g} ({KL_CONVENTION}; {n_inf} infinite positions)")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        fh.write(header_line(cfg, seed) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("checkpoint", "heldout_instances", "greedy_resolution_rate", "reverse_kl", "n_kl_infinite"))
        w.writerow((Path(args.checkpoint).name, len(trainer.heldout), f"{rate:.12g}", f"{kl:.12g}", n_inf))
    return 0


def render_log(lines) -> list[str]:
    """Human-readable rendering of a trajectory log."""
    out = []
    current = None
    for n, line in enumerate(lines, start=1):
        if line.startswith("#"):
            out.append(line.rstrip("\n"))
            continue
        if line.rstrip("\n") == "\t".join(TRAJECTORY_LOG_FIELDS) or not line.strip():
            continue
        try:
            rec = parse_trajectory_line(line)
        except ValueError as e:
            raise CliError(f"line {n}: {e}") from e
        key = (rec["experiment_id"], rec["iteration"], rec["instance_id"])
        if key != current:
            current = key
            out.append(f"== {rec['experiment_id']} iteration {rec['iteration']} instance {rec['instance_id']}")
        who = "teacher" if rec["indicator"] == 1 else "student"
        label = "" if rec["teacher_tokens"] is None else f"  label={list(rec['teacher_tokens'])}"
        out.append(f"  t={rec['turn_index']:<3d} {who:<7} action={list(rec['executed_tokens'])}{label}  -> {rec['observation']}")
        if rec["success_flag_on_last_turn"] is not None:
            out.append(f"  {'resolved' if rec['success_flag_on_last_turn'] else 'failed'}")
    return out


def cmd_replay(args) -> int:
    try:
        with open(args.log) as fh:
            text = render_log(fh)
    except OSError as e:
        raise CliError(f"cannot read log: {e}") from e
    rendered = "\n".join(text) + "\n"
    if args.out is None:
        sys.stdout.write(rendered)
    else:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imitlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"imitlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (default: config output_dir)"):
        p.add_argument("--config", required=True, help="experiment config (TOML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes; results do not depend on it")
        p.add_argument("--out", default=None, help=out_help)

    p = sub.add_parser("train", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("study", help="horizon-scaling or sample-scaling study")
    p.add_argument("kind", choices=("horizon", "scaling"))
    common(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out instances")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="render a trajectory log human-readably")
    p.add_argument("log")
    p.add_argument("--out", default=None, help="write to a file instead of stdout")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"imitlab: error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:  # output piped into a closed reader, e.g. `| head`
        sys.stderr.close()
        return 0
    except (EnvError, ValueError, RuntimeError) as e:
        print(f"imitlab: run failed: {e}", file=sys.stderr)
        return 1
