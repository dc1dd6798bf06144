"""Command-line entry point.

Subcommands: train, eval, verify, terrain. Exit codes: 0 success,
1 check/training failure, 2 usage or configuration error. The environment
variable GAINLOCO_OUT_ROOT, when set, re-roots relative output paths.
"""

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, build_run_config, read_config_file, write_manifest
from .checkpoint import CheckpointError
from .env import EnvConfig
from .evaluation import (EvalError, format_ablation_table, run_ablation, write_ablation_csv)
from .ppo import Trainer, load_policy_bundle
from .sim import SimulationFault
from .terrain import TerrainKind, TerrainParameterError, export_terrain_csv, generate_terrain
from .verify import run_verification

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("GAINLOCO_OUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def cmd_train(args: argparse.Namespace) -> int:
    try:
        file_items = read_config_file(args.config) if args.config else {}
        overrides = list(args.set or [])
        if args.iterations is not None:
            overrides.append(f"train.iterations={args.iterations}")
        if args.preset is not None:
            overrides.append(f"run.preset={args.preset}")
        if args.variant is not None:
            overrides.append(f"run.variant={args.variant}")
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.terrains is not None:
            overrides.append(f"env.terrains={args.terrains}")
        if args.out is not None:
            overrides.append(f"run.out_dir={args.out}")
        cfg = build_run_config(file_items, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    run_dir = _resolve_out(cfg.out_dir)
    try:
        trainer = Trainer(cfg.train, cfg.env, cfg.estimator, variant=cfg.variant,
                          preset=cfg.preset, seed=cfg.seed)
        write_manifest(cfg, run_dir, extra={"command": "train"})
        result = trainer.train(run_dir, log=print if not args.quiet else None)
    except (SimulationFault, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"run directory: {result.run_dir}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        terrains = [TerrainKind.from_name(t) for t in args.terrains.split(",") if t.strip()]
        commands = [float(c) for c in args.commands.split(",") if c.strip()]
    except (TerrainParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not terrains or not commands:
        print("error: need at least one terrain and one command", file=sys.stderr)
        return EXIT_USAGE

    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints: dict[str, list] = {}
    try:
        for path in args.checkpoint:
            bundle_variant = load_policy_bundle(path).variant
            if args.variant is not None and bundle_variant != args.variant:
                raise EvalError(f"checkpoint {path} holds variant {bundle_variant!r}, "
                                f"requested {args.variant!r}")
            checkpoints.setdefault(bundle_variant, []).append(path)
        env_cfg = EnvConfig()
        rows = run_ablation(checkpoints, terrains, commands, env_cfg,
                            episodes=args.episodes, n_steps=args.steps,
                            obs_mode=args.obs_mode, trace_dir=out_dir / "traces")
    except (CheckpointError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationFault as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    csv_path = out_dir / "eval_report.csv"
    write_ablation_csv(rows, csv_path)
    table = format_ablation_table(rows)
    (out_dir / "eval_report.txt").write_text(table + "\n")
    print(table)
    print(f"report: {csv_path}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    ok, results = run_verification(corrupt_gradient=args.corrupt_gradient)
    failed = [r.name for r in results if not r.passed]
    if not ok:
        print(f"FAILED checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_terrain(args: argparse.Namespace) -> int:
    try:
        kind = TerrainKind.from_name(args.kind)
        params = {}
        if args.angle is not None:
            params["angle"] = args.angle
        if args.rise is not None:
            params["rise"] = args.rise
        if args.run is not None:
            params["run"] = args.run
        if args.amplitude is not None:
            params["amplitude"] = args.amplitude
        field = generate_terrain(kind, params, seed=args.seed, extent=args.extent,
                                 cell_size=args.cell)
    except TerrainParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_terrain_csv(field, out)
    h = field.heights
    print(f"kind={kind.name.lower()} grid={h.shape[0]}x{h.shape[1]} "
          f"cell={field.cell_size} min={h.min():.4f} max={h.max():.4f} "
          f"mean={h.mean():.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gainloco",
        description="Quadruped locomotion trainer with learned PD gain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy")
    p_train.add_argument("--config", help="config file path")
    p_train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="override a config value (repeatable)")
    p_train.add_argument("--out", help="run output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--preset", choices=("paper", "desk"))
    p_train.add_argument("--variant", choices=("baseline", "sa", "nc", "full"))
    p_train.add_argument("--terrains", help="comma list: level,slope,rough,stairs")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate trained checkpoints")
    p_eval.add_argument("--checkpoint", action="append", required=True,
                        help="checkpoint path (repeatable)")
    p_eval.add_argument("--variant", help="refuse checkpoints of any other variant")
    p_eval.add_argument("--terrains", default="level")
    p_eval.add_argument("--commands", default="0.5", help="comma list of vx commands (m/s)")
    p_eval.add_argument("--episodes", type=int, default=3)
    p_eval.add_argument("--steps", type=int, default=1000)
    p_eval.add_argument("--obs-mode", choices=("oracle", "estimated"), default="estimated")
    p_eval.add_argument("--out", default="eval_out")
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the self-check suite")
    p_verify.add_argument("--corrupt-gradient", action="store_true",
                          help=argparse.SUPPRESS)  # test hook
    p_verify.set_defaults(func=cmd_verify)

    p_terrain = sub.add_parser("terrain", help="generate and export a heightfield")
    p_terrain.add_argument("--kind", required=True)
    p_terrain.add_argument("--seed", type=int, default=0)
    p_terrain.add_argument("--angle", type=float, help="slope angle (rad)")
    p_terrain.add_argument("--rise", type=float, help="stair rise (m)")
    p_terrain.add_argument("--run", type=float, help="stair run (m)")
    p_terrain.add_argument("--amplitude", type=float, help="rough noise amplitude (m)")
    p_terrain.add_argument("--extent", type=float, default=12.0)
    p_terrain.add_argument("--cell", type=float, default=0.1)
    p_terrain.add_argument("--out", default="terrain.csv")
    p_terrain.set_defaults(func=cmd_terrain)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
