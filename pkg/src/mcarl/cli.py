"""Command line entry point: ``mcarl {train,eval,transfer,distance,inspect-checkpoint}``.

Exit status is 0 on success, 1 for usage, configuration and input errors,
and 2 when a run aborts at runtime.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, ConfigError, NumericalError

log = logging.getLogger("mcarl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcarl", description="Morphology-conditioned locomotion training on a surrogate quadruped.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy; writes config, metrics, checkpoints and manifest")
    t.add_argument("--config", help="YAML config (merged over the packaged defaults); "
                                    "relative names are also looked up in $MCARL_CONFIG_DIR")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. --set ppo.lr=3e-4 (repeatable)")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=["P0", "P1", "P2", "P3", "P4", "P5"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--output", help="run directory")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="zero-shot evaluation of one checkpoint on presets")
    e.add_argument("checkpoint")
    e.add_argument("--preset", action="append", default=[], help="built-in key or YAML path (repeatable)")
    e.add_argument("--episodes", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episode-steps", type=int)
    e.add_argument("--output", help="directory for eval.csv / eval.txt")

    x = sub.add_parser("transfer", help="variant x preset transfer report and distance correlation")
    x.add_argument("checkpoints", nargs="+", help="checkpoint files or run directories")
    x.add_argument("--preset", action="append", default=[], help="built-in key or YAML path (repeatable)")
    x.add_argument("--train-preset", help="reference robot for distances (default: from each checkpoint)")
    x.add_argument("--episodes", type=int, default=1)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--episode-steps", type=int)
    x.add_argument("--metric", choices=["speed", "tracking"], default="speed")
    x.add_argument("--output", default="transfer", help="report directory")
    x.add_argument("--plot", action="store_true", help="also write PNG figures")

    d = sub.add_parser("distance", help="pairwise morphology distance matrix")
    d.add_argument("vectors", nargs="+", help="built-in preset keys, preset YAML or vector files")
    d.add_argument("--output", help="CSV path (default: stdout)")

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint header summary as JSON")
    i.add_argument("checkpoint")
    return p


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .config import load_run_config
    from .trainer import run_training

    overrides = list(args.overrides)
    for key, val in (("seed", args.seed), ("variant", args.variant), ("iterations", args.iterations),
                     ("output_dir", args.output)):
        if val is not None:
            overrides.append(f"{key}={val}")
    cfg = load_run_config(args.config, overrides)

    def progress(row):
        if not args.quiet:
            tr = row["mean_tracking_reward"]
            tr = "n/a" if tr is None else f"{tr:.4f}"
            print(f"iter {row['iteration']:5d}  tracking {tr:>8}  episodes {row['episodes']:3d}  "
                  f"lr {row['lr']:.2e}", flush=True)

    trainer = run_training(cfg, resume=args.resume, progress=progress)
    print(f"finished {trainer.iteration} iterations in {cfg.output_dir}")
    return EXIT_OK


def _presets(refs):
    from .presets import builtin_presets, load_preset
    return [load_preset(r) for r in refs] if refs else builtin_presets()


def cmd_eval(args) -> int:
    from .transfer import evaluate_zero_shot, load_policy

    loaded = load_policy(args.checkpoint)
    presets = _presets(args.preset)
    results = [evaluate_zero_shot(loaded, p, episodes=args.episodes, seed=args.seed,
                                  episode_steps=args.episode_steps) for p in presets]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "speed", "max_sustained_command", "tracking", "failure_rate"])
    for r in results:
        w.writerow([r.preset, repr(r.speed), repr(r.max_sustained_command), repr(r.tracking), repr(r.failure_rate)])
    lines = [f"{'preset':<14}{'speed':>8}{'cmd':>6}{'tracking':>10}{'fail':>6}"]
    for r in results:
        lines.append(f"{r.preset:<14}{r.speed:8.2f}{r.max_sustained_command:6.1f}{r.tracking:10.3f}"
                     f"{r.failure_rate:6.2f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(buf.getvalue())
        (out / "eval.txt").write_text(text)
    return EXIT_OK


def _resolve_checkpoint(ref) -> Path:
    p = Path(ref)
    if p.is_dir():
        cand = p / "checkpoints" / "last.ckpt"
        if not cand.exists():
            raise CheckpointError(f"{p}: no checkpoints/last.ckpt in run directory")
        return cand
    return p


def cmd_transfer(args) -> int:
    from .transfer import build_transfer_matrix, correlation_csv, distance_performance_correlation, load_policy

    presets = _presets(args.preset)
    ckpts = {}
    for ref in args.checkpoints:
        path = _resolve_checkpoint(ref)
        loaded = load_policy(path)
        key = (loaded.config.variant, loaded.config.seed)
        if key in ckpts:
            raise ConfigError(f"two checkpoints for variant {key[0]} seed {key[1]}")
        ckpts[key] = loaded
    report = build_transfer_matrix(ckpts, presets, episodes=args.episodes, eval_seed=args.seed,
                                   train_preset=args.train_preset, episode_steps=args.episode_steps)
    corr = distance_performance_correlation(report, args.metric)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "transfer.csv")
    table = report.format_table(args.metric)
    (out / "transfer.txt").write_text(table)
    correlation_csv(corr, out / "correlation.csv")
    print(table, end="")
    for c in corr:
        rho = f"{c.rho:+.3f}" if c.defined else f"undefined ({c.reason})"
        print(f"spearman(distance, {args.metric}) {c.variant} seed {c.seed}: {rho}")
    if args.plot:
        from .plotting import distance_vs_speed, transfer_heatmap
        transfer_heatmap(report, out / "transfer_heatmap.png", args.metric)
        distance_vs_speed(corr, out / "distance_vs_speed.png")
    return EXIT_OK


def _load_any_vector(ref):
    from .morphology import load_vector
    from .presets import BUILTIN, load_preset

    p = Path(ref)
    if ref in BUILTIN and not p.exists():
        pr = load_preset(ref)
        return pr.name, pr.morphology
    if not p.exists():
        raise ConfigError(f"vector file not found: {p}")
    if p.suffix in (".yaml", ".yml"):
        from . import yamlio
        try:
            data = yamlio.load(p.read_text())
        except yamlio.YAMLError:
            data = None
        if isinstance(data, dict) and "name" in data and "morphology" in data:
            pr = load_preset(p)
            return pr.name, pr.morphology
    return p.stem, load_vector(p)


def cmd_distance(args) -> int:
    from .morphology import default_distance_weights, distance_matrix

    if len(args.vectors) < 2:
        raise ConfigError("distance needs at least two vectors")
    named = [_load_any_vector(v) for v in args.vectors]
    mat = distance_matrix([v for _, v in named], default_distance_weights())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + [n for n, _ in named])
    for (n, _), row in zip(named, mat):
        w.writerow([n] + [f"{x:.6f}" for x in row])
    if args.output:
        Path(args.output).write_text(buf.getvalue())
    else:
        print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .checkpoint import inspect_checkpoint
    print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "transfer": cmd_transfer, "distance": cmd_distance,
            "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, MemoryError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
