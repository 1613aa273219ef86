"""Command-line front end.

Exit codes: 0 success, 1 validation/usage failure (bad flags, missing files,
failed oracle claims), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import __version__, equilibria, games, harness, model as model_mod, trainer
from .nn import ConfigError


class UsageExit(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise UsageExit(1)

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise UsageExit(status)


def _add_game_arg(p: _Parser):
    p.add_argument("game_pos", nargs="?", metavar="GAME", default=None,
                   help="path to a game document")
    p.add_argument("--game", dest="game_flag", default=None,
                   help="path to a game document (alternative to the positional)")


def _add_run_args(p: _Parser):
    p.add_argument("--variant", default="full", choices=list(model_mod.VARIANTS),
                   help="network variant (default: full)")
    p.add_argument("--obs-mode", choices=[games.GLOBAL_STATE, games.LOCAL_ONLY],
                   default=None, help="override the document's observation mode")
    p.add_argument("--priority", default=None,
                   help="decision order as 1-based agent ids, e.g. 2,1")
    p.add_argument("--steps", type=int, default=None, help="env-step budget")
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--clip", type=float, default=None, help="PPO clipping ratio")
    p.add_argument("--entropy-coef", type=float, default=None,
                   help="initial entropy bonus coefficient")
    p.add_argument("--gamma", type=float, default=None, help="discount factor")
    p.add_argument("--gae-lambda", type=float, default=None,
                   help="advantage estimator decay")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="steerlab",
                     description="Stackelberg decision-transformer laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    p_train = sub.add_parser("train",
                             help="train one seeded run")
    _add_game_arg(p_train)
    _add_run_args(p_train)
    p_train.add_argument("--seed", type=int, default=0, help="rng seed")

    p_sweep = sub.add_parser("sweep",
                             help="run a multi-seed sweep and aggregate")
    _add_game_arg(p_sweep)
    _add_run_args(p_sweep)
    p_sweep.add_argument("--seeds", type=int, default=20,
                         help="number of seeds (0..N-1, default 20)")
    p_sweep.add_argument("--workers", type=int, default=None,
                         help="parallel worker processes (default: one per core)")
    p_sweep.add_argument("--from-manifest", default=None,
                         help="re-run a sweep exactly as recorded in a manifest")

    p_abl = sub.add_parser("ablate",
                           help="sweep a grid of network variants")
    _add_game_arg(p_abl)
    _add_run_args(p_abl)
    p_abl.add_argument("--seeds", type=int, default=20, help="seeds per variant")
    p_abl.add_argument("--workers", type=int, default=None)
    p_abl.add_argument("--variants", default=",".join(model_mod.VARIANTS),
                       help="comma-separated variant list")

    p_oracle = sub.add_parser("oracle",
                              help="print the exact equilibrium report")
    p_oracle.add_argument("game", help="path to a game document")
    p_oracle.add_argument("--priority", default=None,
                          help="decision order as 1-based agent ids")

    p_eval = sub.add_parser("eval",
                            help="greedy rollout of a checkpoint + oracle match")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint path")
    _add_game_arg(p_eval)
    p_eval.add_argument("--priority", default=None)

    return parser


def _resolve_game(args) -> str:
    path = args.game_flag or args.game_pos
    if not path:
        raise ConfigError("a game document is required (positional or --game)")
    if not os.path.exists(path):
        raise ConfigError(f"game document not found: {path}")
    return path


def _parse_priority(text: str | None):
    if text is None:
        return None
    try:
        perm = tuple(int(tok) - 1 for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"priority must be 1-based integers, got {text!r}") from None
    return perm


def _train_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if args.steps is not None:
        cfg.total_steps = args.steps
    if args.lr is not None:
        cfg.lr = args.lr
    if args.clip is not None:
        cfg.clip_eps = args.clip
        cfg.value_clip_eps = args.clip
    if args.entropy_coef is not None:
        cfg.entropy_coef = args.entropy_coef
    if args.gamma is not None:
        cfg.gamma = args.gamma
    if args.gae_lambda is not None:
        cfg.gae_lambda = args.gae_lambda
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    game = _resolve_game(args)
    priority = _parse_priority(args.priority)
    spec = harness.load_validated_spec(game, args.obs_mode)
    report = equilibria.solve_stages(spec, priority)
    tcfg = _train_config(args)
    tcfg.seed = args.seed
    model_cfg = model_mod.ModelConfig.from_game(
        spec, obs_mode=args.obs_mode, variant=args.variant, priority=priority
    )
    out = args.out
    metrics_path = None
    if out:
        os.makedirs(out, exist_ok=True)
        metrics_path = os.path.join(out, "metrics.csv")
    result = trainer.train(spec, model_cfg, tcfg, se_paths=report.se_paths,
                           metrics_path=metrics_path)
    if out:
        model_mod.save_checkpoint(result.model, os.path.join(out, "checkpoint"))
    final = result.final_eval
    print(f"game: {spec.name}  variant: {args.variant}  seed: {args.seed}")
    print("greedy trajectory:", " -> ".join(games.format_joint(j)
                                            for j in final["trajectory"]))
    print("greedy returns:", " ".join(f"{r:.6g}" for r in final["returns"]))
    print(f"matches oracle equilibrium path: {'yes' if final['se_match'] else 'no'}")
    if out:
        print(f"artifacts written to {out}")
    return 0


def _cmd_sweep(args) -> int:
    if args.from_manifest:
        out = args.out or (os.path.dirname(args.from_manifest) or ".") + "_rerun"
        result = harness.rerun_from_manifest(args.from_manifest, out, quiet=False)
    else:
        game = _resolve_game(args)
        if args.out is None:
            raise ConfigError("--out directory is required for sweeps")
        config = harness.ExperimentConfig(
            game=game,
            out_dir=args.out,
            variant=args.variant,
            obs_mode=args.obs_mode,
            priority=_parse_priority(args.priority),
            train=_train_config(args),
            seeds=tuple(range(args.seeds)),
            workers=args.workers,
        )
        result = harness.run_sweep(config, quiet=False)
    print(f"convergence: {result.n_converged}/{len(result.config.seeds)}"
          f" ({100 * result.convergence:.0f}%)")
    if result.mean_returns:
        bands = ", ".join(
            f"agent {i + 1}: {m:.4g} [{lo:.4g}, {hi:.4g}]"
            for i, (m, lo, hi) in enumerate(
                zip(result.mean_returns, result.ci_low, result.ci_high))
        )
        print(f"mean final returns (95% CI): {bands}")
    if result.failed_seeds:
        print(f"warning: seeds {result.failed_seeds} failed; aggregate covers the rest",
              file=sys.stderr)
    harness.emit_plot_data(result.config.out_dir)
    return 0


def _cmd_ablate(args) -> int:
    game = _resolve_game(args)
    if args.out is None:
        raise ConfigError("--out directory is required for ablation grids")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    for v in variants:
        if v not in model_mod.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    config = harness.ExperimentConfig(
        game=game,
        out_dir=args.out,
        obs_mode=args.obs_mode,
        priority=_parse_priority(args.priority),
        train=_train_config(args),
        seeds=tuple(range(args.seeds)),
        workers=args.workers,
    )
    results = harness.run_ablation(config, variants, quiet=False)
    print("convergence by variant:")
    for v in sorted(results, key=lambda v: -results[v].convergence):
        r = results[v]
        print(f"  {v:10s} {r.n_converged}/{len(r.config.seeds)}")
    return 0


def _cmd_oracle(args) -> int:
    if not os.path.exists(args.game):
        raise ConfigError(f"game document not found: {args.game}")
    spec = games.load_spec(args.game)
    priority = _parse_priority(args.priority)
    report = equilibria.solve_stages(spec, priority)
    results = equilibria.validate_claims(spec, priority=priority)
    sys.stdout.write(equilibria.render_report(spec, report, results))
    if any(not r.passed for r in results):
        print("one or more embedded claims FAILED", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    game = _resolve_game(args)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = model_mod.load_checkpoint(args.checkpoint)
    spec = harness.load_validated_spec(game, model.config.obs_mode)
    priority = _parse_priority(args.priority) or model.config.priority
    report = equilibria.solve_stages(spec, priority)
    returns, trajectory, se_match = trainer.evaluate_greedy(
        spec, model, episodes=1, gamma=spec.gamma, se_paths=report.se_paths
    )
    print("greedy trajectory:", " -> ".join(games.format_joint(j) for j in trajectory))
    print("greedy returns:", " ".join(f"{r:.6g}" for r in returns))
    print(f"matches oracle equilibrium path: {'yes' if se_match else 'no'}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "oracle": _cmd_oracle,
    "eval": _cmd_eval,
}

_VALIDATION_ERRORS = (
    ConfigError,
    games.GameError,
    equilibria.OracleError,
    harness.HarnessError,
    ValueError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as u:
        return u.code
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageExit as u:
        return u.code
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {err}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
