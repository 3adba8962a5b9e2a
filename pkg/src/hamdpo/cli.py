"""Command-line harness: ``train``, ``verify`` and ``ablate``.

Exit codes: 0 success, 1 a check or training run failed, 2 usage or config
error.  ``HAMDPO_OUTPUT_DIR`` overrides the output directory of any command.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import inspect
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import envs
from . import trainer as tr
from .rollout import GaeConfig, TrainingDiverged
from .verify import run_verification

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUT_ENV = "HAMDPO_OUTPUT_DIR"
FINAL_WINDOW = 10

# Metric columns in file order; one kl_agent<i> column per agent follows these.
BASE_COLUMNS = [
    "iteration",
    "env_steps",
    "mean_return",
    "policy_loss",
    "critic_loss",
    "entropy",
    "stepsize",
    "grad_clipped",
    "wall_time_ms",
]

ENV_FACTORIES = {
    "matrix_game": envs.matrix_game,
    "spread_grid": envs.spread_grid,
    "continuous_gather": envs.continuous_gather,
    "tabular": envs.tabular_from_config,
}

_INT, _REAL, _BOOL, _STR = "integer", "number", "boolean", "string"
TRAINER_TYPES = {
    "iterations": _INT,
    "sgd_steps": _INT,
    "learning_rate": _REAL,
    "stepsize": _REAL,
    "schedule": _STR,
    "episodes_per_iteration": _INT,
    "algorithm": _STR,
    "clip_epsilon": _REAL,
    "seed": _INT,
    "advantage_normalization": _BOOL,
    "critic_lr": _REAL,
    "critic_epochs": _INT,
    "critic_minibatch": _INT,
    "hidden": "list of integers",
    "log_std_init": _REAL,
    "max_grad_norm": _REAL,
    "workers": _INT,
}
OUTPUT_TYPES = {"dir": _STR, "flush_interval": _INT, "record_wall_time": _BOOL}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env_name: str
    env_params: dict
    trainer: tr.TrainerConfig
    output_dir: Path
    flush_interval: int = 1
    record_wall_time: bool = False

    def make_env(self):
        return ENV_FACTORIES[self.env_name](**self.env_params)

    def canonical(self) -> dict:
        """Everything that affects results; output settings are excluded."""
        t = dataclasses.asdict(self.trainer)
        t["hidden"] = list(t["hidden"])
        return {"env": {"name": self.env_name, **self.env_params}, "trainer": t}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _type_ok(value, kind: str) -> bool:
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _REAL:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind == _STR:
        return isinstance(value, str)
    return isinstance(value, list) and all(_type_ok(v, _INT) for v in value)


def _check_table(section: str, table, types: dict) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    for key, value in table.items():
        if key not in types:
            raise ConfigError(f"{section}.{key}: unknown key (allowed: {', '.join(sorted(types))})")
        if not _type_ok(value, types[key]):
            raise ConfigError(f"{section}.{key}: expected {types[key]}, got {value!r}")
    return dict(table)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed TOML document; every problem names its field."""
    for key in raw:
        if key not in ("env", "trainer", "output"):
            raise ConfigError(f"{key}: unknown top-level key (allowed: env, output, trainer)")
    if "env" not in raw or "name" not in raw.get("env", {}):
        raise ConfigError("env.name: required")
    env = dict(raw["env"])
    name = env.pop("name")
    if name not in ENV_FACTORIES:
        raise ConfigError(f"env.name: unknown environment {name!r} (allowed: {', '.join(sorted(ENV_FACTORIES))})")
    allowed = inspect.signature(ENV_FACTORIES[name]).parameters
    for key in env:
        if key not in allowed:
            raise ConfigError(f"env.{key}: unknown parameter for {name} (allowed: {', '.join(allowed)})")

    trainer = dict(raw.get("trainer", {}))
    gae = trainer.pop("gae", {})
    _check_table("trainer", trainer, TRAINER_TYPES)
    _check_table("trainer.gae", gae, {"gamma": _REAL, "lam": _REAL})
    output = _check_table("output", raw.get("output", {}), OUTPUT_TYPES)
    try:
        cfg = tr.TrainerConfig(**trainer, gae=GaeConfig(**gae))
    except ValueError as exc:
        raise ConfigError(f"trainer: {exc}") from None
    if cfg.learning_rate <= 0:
        raise ConfigError("trainer.learning_rate: must be positive")
    if cfg.episodes_per_iteration is not None and cfg.episodes_per_iteration < 1:
        raise ConfigError("trainer.episodes_per_iteration: must be at least 1")
    flush = output.get("flush_interval", 1)
    if flush < 1:
        raise ConfigError("output.flush_interval: must be at least 1")

    exp = ExperimentConfig(
        env_name=name,
        env_params=env,
        trainer=cfg,
        output_dir=Path(output.get("dir", "runs")),
        flush_interval=flush,
        record_wall_time=output.get("record_wall_time", False),
    )
    try:
        exp.make_env()
    except (TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"env: {exc}") from None
    return exp


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return parse_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def output_dir(default) -> Path:
    override = os.environ.get(OUTPUT_ENV)
    return Path(override) if override else Path(default)


# --------------------------------------------------------------------------
# Training


def metric_columns(n_agents: int) -> list[str]:
    return BASE_COLUMNS + [f"kl_agent{i}" for i in range(n_agents)] + ["config_hash"]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metric_row(metrics: dict, config_hash: str, record_wall_time: bool) -> list[str]:
    row = [
        metrics["iteration"],
        metrics["env_steps"],
        float(metrics["mean_return"]),
        float(metrics["policy_loss"]),
        float(metrics["critic_loss"]),
        float(metrics["entropy"]),
        float(metrics["stepsize"]),
        metrics["grad_clipped"],
        metrics["wall_time_ms"] if record_wall_time else 0,
    ]
    row += [float(k) for k in metrics["agent_kl"]]
    return [_fmt(x) for x in row] + [config_hash]


def _finite(metrics: dict) -> bool:
    vals = [metrics["mean_return"], metrics["policy_loss"], metrics["critic_loss"], metrics["entropy"]]
    return bool(np.all(np.isfinite(vals + list(metrics["agent_kl"]))))


def run_experiment(exp: ExperimentConfig, out: Path, threshold: float | None = None) -> dict:
    """Train, streaming metrics to ``out/metrics.csv``; returns the summary dict."""
    out.mkdir(parents=True, exist_ok=True)
    env = exp.make_env()
    cfg = exp.trainer
    config_hash = exp.hash()
    summary = {
        "config_hash": config_hash,
        "seed": cfg.seed,
        "algorithm": cfg.algorithm,
        "env": exp.env_name,
        "sgd_steps": cfg.sgd_steps,
        "iterations_requested": cfg.iterations,
        "iterations_completed": 0,
        "status": "ok",
        "error": None,
        "failed_iteration": None,
        "final_mean_return": None,
        "grad_clip_events": 0,
    }
    if threshold is not None:
        summary["threshold"] = threshold
        summary["iterations_to_threshold"] = None

    returns = []
    state = tr.init_state(env, cfg)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metric_columns(env.spec.n_agents))
        fh.flush()
        for k in range(cfg.iterations):
            try:
                state, metrics = tr.run_iteration(state, env, cfg, k)
                if not _finite(metrics):
                    raise TrainingDiverged("non-finite metric value")
            except (TrainingDiverged, FloatingPointError) as exc:
                summary.update(status="diverged", error=str(exc), failed_iteration=k)
                break
            writer.writerow(metric_row(metrics, config_hash, exp.record_wall_time))
            if (k + 1) % exp.flush_interval == 0:
                fh.flush()
            returns.append(metrics["mean_return"])
            summary["iterations_completed"] = k + 1
            summary["grad_clip_events"] += metrics["grad_clipped"]
            if threshold is not None and summary["iterations_to_threshold"] is None:
                if metrics["mean_return"] >= threshold:
                    summary["iterations_to_threshold"] = k + 1
    if returns:
        summary["final_mean_return"] = float(np.mean(returns[-FINAL_WINDOW:]))
    tr.save_checkpoint(out / "checkpoint.npz", state)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    exp = load_config(args.config)
    out = output_dir(exp.output_dir)
    summary = run_experiment(exp, out)
    _report(summary, out)
    return EXIT_OK if summary["status"] == "ok" else EXIT_FAIL


def _report(summary: dict, out: Path) -> None:
    line = f"{out}: {summary['iterations_completed']} iterations, final mean return {summary['final_mean_return']}"
    if summary["status"] != "ok":
        line += f"; aborted at iteration {summary['failed_iteration']}: {summary['error']}"
    print(line)


def parse_steps(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--sgd-steps: give at least one value, e.g. 1,4,10")
    try:
        steps = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--sgd-steps: expected comma-separated integers, got {text!r}") from None
    if any(g < 1 for g in steps):
        raise ConfigError("--sgd-steps: values must be at least 1")
    return steps


def cmd_ablate(args) -> int:
    steps = parse_steps(args.sgd_steps)
    exp = load_config(args.config)
    root = output_dir(exp.output_dir)
    results, status = [], EXIT_OK
    for g in steps:
        sub = replace(exp, trainer=replace(exp.trainer, sgd_steps=g))
        out = root / f"sgd_steps_{g}"
        summary = run_experiment(sub, out, args.threshold)
        _report(summary, out)
        results.append(summary)
        if summary["status"] != "ok":
            status = EXIT_FAIL
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.json").write_text(json.dumps({"runs": results}, indent=2, sort_keys=True) + "\n")
    return status


def cmd_verify(args) -> int:
    try:
        counts = [int(x) for x in args.agents.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--agents: expected comma-separated integers, got {args.agents!r}") from None
    if args.games < 1 or not counts or any(c < 1 or c > 4 for c in counts):
        raise ConfigError("--games must be >= 1 and --agents values must lie in 1..4")
    started = time.perf_counter()
    report = run_verification(args.seed, args.games, counts, corrupt=args.corrupt)
    out = output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "verification.json")
    for r in report.results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max error {r.max_error:.3e} (tol {r.tolerance:.0e}, {r.checks} checks)")
    print(f"{'all identities pass' if report.passed else 'verification FAILED'} in {time.perf_counter() - started:.1f}s")
    return EXIT_OK if report.passed else EXIT_FAIL


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hamdpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the exact tabular identity suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--games", type=int, default=100)
    p.add_argument("--agents", default="2,3", help="comma-separated agent counts to cycle through")
    p.add_argument("--corrupt", action="store_true", help="negative control: break the decomposition oracle")
    p.add_argument("--out", default="runs/verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="repeat a config for several sgd_steps values")
    p.add_argument("config")
    p.add_argument("--sgd-steps", required=True)
    p.add_argument("--threshold", type=float, default=0.9, help="mean return counted as solved")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
