"""Experiment orchestration: seeded sweeps, ablation grids, plot-ready data.

A sweep fans independent seeded runs out over worker processes, then writes
four artifacts under its output directory: ``manifest`` (everything needed to
reproduce the sweep), ``result`` (deterministic aggregate + per-seed records),
``timings`` (wall-clock seconds, kept separate so result files are bit-stable
across re-runs), and one ``seed_<k>/`` directory per seed holding the metrics
CSV and final checkpoint.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from . import __version__, equilibria, games
from .games import GameSpec
from .model import ModelConfig, save_checkpoint
from .trainer import TrainConfig, train

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


class HarnessError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    game: str
    out_dir: str
    variant: str = "full"
    obs_mode: str | None = None  # None keeps the document's mode
    priority: tuple[int, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = tuple(range(20))
    workers: int | None = None  # None = one per core, capped by seed count

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise HarnessError("at least one seed is required")
        if self.priority is not None:
            self.priority = tuple(int(p) for p in self.priority)

    def to_dict(self) -> dict:
        return {
            "game": self.game,
            "out_dir": self.out_dir,
            "variant": self.variant,
            "obs_mode": self.obs_mode,
            "priority": list(self.priority) if self.priority else None,
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict, out_dir: str | None = None) -> "ExperimentConfig":
        train_cfg = TrainConfig(**d["train"])
        return cls(
            game=d["game"],
            out_dir=out_dir or d["out_dir"],
            variant=d.get("variant", "full"),
            obs_mode=d.get("obs_mode"),
            priority=tuple(d["priority"]) if d.get("priority") else None,
            train=train_cfg,
            seeds=tuple(d["seeds"]),
        )


@dataclass
class SweepResult:
    config: ExperimentConfig
    per_seed: list[dict]  # seed, se_match, returns, wall_time, error
    convergence: float
    mean_returns: list[float]
    ci_low: list[float]
    ci_high: list[float]
    failed_seeds: list[int]

    @property
    def n_converged(self) -> int:
        return sum(1 for r in self.per_seed if r.get("se_match"))


def load_validated_spec(path: str, obs_mode: str | None = None) -> GameSpec:
    """Load a game document and certify its embedded oracle claims."""
    spec = games.load_spec(path)
    if obs_mode:
        spec = games.GameSpec(**{**vars(spec), "obs_mode": obs_mode})
    failed = [r for r in equilibria.validate_claims(spec) if not r.passed]
    if failed:
        raise HarnessError(
            f"game {spec.name!r} fails oracle claims: "
            + "; ".join(f"{r.kind} {r.stage or ''}".strip() for r in failed)
        )
    return spec


def _run_seed(payload: dict) -> dict:
    """One isolated training run (executed inside a worker process)."""
    started = time.time()
    exp = ExperimentConfig.from_dict(payload["config"])
    seed = payload["seed"]
    seed_dir = payload["seed_dir"]
    try:
        spec = load_validated_spec(exp.game, exp.obs_mode)
        report = equilibria.solve_stages(spec, exp.priority)
        model_cfg = ModelConfig.from_game(
            spec, obs_mode=exp.obs_mode, variant=exp.variant, priority=exp.priority
        )
        tcfg = TrainConfig(**{**exp.train.to_dict(), "seed": seed})
        os.makedirs(seed_dir, exist_ok=True)
        result = train(spec, model_cfg, tcfg, se_paths=report.se_paths,
                       metrics_path=os.path.join(seed_dir, "metrics.csv"))
        save_checkpoint(result.model, os.path.join(seed_dir, "checkpoint"))
        final = result.final_eval
        return {
            "seed": seed,
            "se_match": bool(final["se_match"]),
            "returns": [float(x) for x in final["returns"]],
            "trajectory": [list(j) for j in final["trajectory"]],
            "wall_time": time.time() - started,
            "error": None,
        }
    except Exception as err:  # noqa: BLE001 - per-seed isolation is the contract
        return {
            "seed": seed,
            "se_match": False,
            "returns": None,
            "trajectory": None,
            "wall_time": time.time() - started,
            "error": f"{type(err).__name__}: {err}",
        }


def _limit_blas_threads() -> None:
    # Worker processes each keep one core busy; nested BLAS threads only fight.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def run_sweep(config: ExperimentConfig, quiet: bool = True) -> SweepResult:
    """Run every seed (parallel across processes) and aggregate.

    Individual seed failures are recorded and excluded from the aggregate,
    which is then flagged via ``failed_seeds``.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    spec = load_validated_spec(config.game, config.obs_mode)
    report = equilibria.solve_stages(spec, config.priority)
    claim_results = equilibria.validate_claims(spec, priority=config.priority)
    oracle_text = equilibria.render_report(spec, report, claim_results)

    manifest = {
        "kind": "sweep",
        "config": config.to_dict(),
        "package_version": __version__,
        "game_sha256": _sha256_file(config.game),
        "oracle_report_sha256": hashlib.sha256(oracle_text.encode()).hexdigest(),
    }
    _write_json(os.path.join(config.out_dir, "manifest"), manifest)
    with open(os.path.join(config.out_dir, "oracle_report"), "w", encoding="utf-8") as fh:
        fh.write(oracle_text)

    payloads = [
        {
            "config": config.to_dict(),
            "seed": seed,
            "seed_dir": os.path.join(config.out_dir, f"seed_{seed}"),
        }
        for seed in config.seeds
    ]
    workers = config.workers or min(len(config.seeds), os.cpu_count() or 1)
    _limit_blas_threads()
    if workers <= 1:
        per_seed = [_run_seed(p) for p in payloads]
    else:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            per_seed = list(pool.map(_run_seed, payloads))
    per_seed.sort(key=lambda r: r["seed"])
    if not quiet:
        for r in per_seed:
            status = "converged" if r["se_match"] else (r["error"] or "missed")
            print(f"  seed {r['seed']}: {status}")

    result = _aggregate(config, per_seed)
    _write_json(os.path.join(config.out_dir, "result"), _result_doc(result))
    _write_json(
        os.path.join(config.out_dir, "timings"),
        {str(r["seed"]): round(r["wall_time"], 3) for r in per_seed},
    )
    return result


def _aggregate(config: ExperimentConfig, per_seed: list[dict]) -> SweepResult:
    ok = [r for r in per_seed if r["error"] is None]
    failed = [r["seed"] for r in per_seed if r["error"] is not None]
    n = len(ok)
    convergence = (sum(1 for r in ok if r["se_match"]) / n) if n else 0.0
    if n:
        returns = np.array([r["returns"] for r in ok])
        mean = returns.mean(axis=0)
        sd = returns.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
        half = Z_95 * sd / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        mean_l, low_l, high_l = mean.tolist(), (mean - half).tolist(), (mean + half).tolist()
    else:
        mean_l = low_l = high_l = []
    return SweepResult(
        config=config,
        per_seed=per_seed,
        convergence=convergence,
        mean_returns=mean_l,
        ci_low=low_l,
        ci_high=high_l,
        failed_seeds=failed,
    )


def _result_doc(result: SweepResult) -> dict:
    per_seed = [
        {k: v for k, v in r.items() if k != "wall_time"} for r in result.per_seed
    ]
    return {
        "kind": "sweep-result",
        "game": result.config.game,
        "variant": result.config.variant,
        "obs_mode": result.config.obs_mode,
        "convergence": result.convergence,
        "n_seeds": len(result.config.seeds),
        "n_converged": result.n_converged,
        "mean_returns": result.mean_returns,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "ci_kind": "normal-approx 95% across seeds",
        "failed_seeds": result.failed_seeds,
        "per_seed": per_seed,
    }


def run_ablation(config: ExperimentConfig, variants: tuple[str, ...],
                 quiet: bool = True) -> dict[str, SweepResult]:
    """One sweep per variant under ``out_dir/<variant>/`` plus a comparison doc."""
    results: dict[str, SweepResult] = {}
    for variant in variants:
        sub = ExperimentConfig.from_dict(
            {**config.to_dict(), "variant": variant},
            out_dir=os.path.join(config.out_dir, variant),
        )
        if not quiet:
            print(f"variant {variant}:")
        results[variant] = run_sweep(sub, quiet=quiet)
    comparison = {
        "kind": "ablation-result",
        "game": config.game,
        "by_variant": {
            v: {
                "convergence": r.convergence,
                "n_converged": r.n_converged,
                "mean_returns": r.mean_returns,
            }
            for v, r in results.items()
        },
        "ranking": sorted(results, key=lambda v: -results[v].convergence),
    }
    _write_json(os.path.join(config.out_dir, "comparison"), comparison)
    return results


def rerun_from_manifest(manifest_path: str, out_dir: str, quiet: bool = True) -> SweepResult:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "sweep":
        raise HarnessError(f"{manifest_path} is not a sweep manifest")
    config = ExperimentConfig.from_dict(manifest["config"], out_dir=out_dir)
    return run_sweep(config, quiet=quiet)


def emit_plot_data(sweep_dir: str, out_path: str | None = None) -> str:
    """Collapse per-seed metrics into one learning-curve CSV.

    One row per evaluation step: mean return (averaged over agents, then over
    seeds) with a 95% normal-approximation confidence band.
    """
    seed_dirs = sorted(
        d for d in os.listdir(sweep_dir)
        if d.startswith("seed_") and os.path.isdir(os.path.join(sweep_dir, d))
    )
    if not seed_dirs:
        raise HarnessError(f"no seed directories under {sweep_dir}")
    by_step: dict[int, list[float]] = {}
    for d in seed_dirs:
        path = os.path.join(sweep_dir, d, "metrics.csv")
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["se_match"] == "":
                    continue
                cols = [float(v) for k, v in row.items()
                        if k.startswith("eval_return_")]
                by_step.setdefault(int(row["env_steps"]), []).append(
                    sum(cols) / len(cols)
                )
    out_path = out_path or os.path.join(sweep_dir, "curve.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env_steps", "return_mean", "ci_low", "ci_high"])
        for step in sorted(by_step):
            vals = np.array(by_step[step])
            mean = float(vals.mean())
            if vals.size > 1:
                half = Z_95 * float(vals.std(ddof=1)) / math.sqrt(vals.size)
            else:
                half = 0.0
            writer.writerow([step, repr(mean), repr(mean - half), repr(mean + half)])
    return out_path


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
