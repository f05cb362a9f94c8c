"""
Command-line entry point for tactile Seq2Seq experiments.

Every command writes into its own run directory
``<out>/<timestamp>-seed<seed>-<command>`` together with the fully resolved
configuration, so a run can be repeated from that file alone.

Usage:
    python seq2seq_cli.py collect-templates --seed 0
    python seq2seq_cli.py dagger --budget 50 --templates runs/.../templates.json
    python seq2seq_cli.py eval --checkpoint runs/.../model.ckpt --episodes 100
"""

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from config import LOG_LEVEL, RunConfig, apply_overrides, read_json_config, write_json_config
from dagger_pipeline import (
    Dataset,
    FeatureScaler,
    ModelPolicy,
    OraclePolicy,
    RunLogger,
    dagger_run,
    fine_tune,
    load_run_log,
    record_from_episode,
    replay_record,
    run_episode,
    train_model,
)
from errors import CheckpointError, ConfigError, Seq2SeqError, error_record
from evaluation import (
    baseline_comparison,
    demo_ablation,
    evaluate,
    repeatability,
    sample_efficiency_report,
    state_estimation_curve,
    write_report,
)
from experts import collect_exploration_templates, load_templates, save_templates
from seq2seq_models import build_model, load_model, save_model
from tactile_sim import TactileEnv

logger = logging.getLogger(__name__)

ARCH_FLAGS = {"transformer": "transformer", "lstm": "lstm", "bc": "bc_lstm"}
EPOCH_KEYS = {"dagger": "train.finetune_epochs"}


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--config", type=Path, help="run config JSON (seq2seq.config.json)")
    common.add_argument("--env-config", type=Path, help="environment config JSON")
    common.add_argument("--model-config", type=Path, help="model config JSON")
    common.add_argument("--out", type=Path, help="parent directory of run directories")
    common.add_argument("--noise", choices=["on", "off"], help="observation/contact noise")
    common.add_argument("--arch", choices=sorted(ARCH_FLAGS), help="policy architecture")
    common.add_argument("--oracle", action="store_true", help="add latent supervision by the hidden pose")
    common.add_argument("--budget", type=int, help="DAgger demonstration budget")
    common.add_argument("--episodes", type=int, help="number of episodes")
    common.add_argument("--epochs", type=int, help="training epochs (fine-tune epochs per episode for dagger)")
    common.add_argument("--trials", type=int, help="test episodes per ablation point")
    common.add_argument("--demo-counts", type=_int_list, help="comma-separated demonstration counts")
    common.add_argument("--workers", type=int, help="parallel evaluation workers")
    common.add_argument("--templates", type=Path, help="exploration template file")
    common.add_argument("--dataset", type=Path, help="demonstration dataset (JSON-lines)")
    common.add_argument("--checkpoint", type=Path, help="model checkpoint")
    common.add_argument("--run-log", type=Path, help="DAgger run log (JSON-lines)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="seq2seq_cli.py",
        description="Seq2Seq imitation learning for tactile latch insertion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMAND_HELP.items():
        command = sub.add_parser(name, parents=[common], help=help_text)
        if name == "eval":
            command.add_argument("--policy", choices=["model", "expert"], default="model",
                                 help="evaluate a checkpoint or the scripted oracle")
        if name == "replay":
            command.add_argument("--index", type=int, help="replay only this record")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then referenced env/model files, then command-line flags."""
    config = read_json_config(args.config) if args.config else RunConfig()
    updates: Dict[str, Any] = {}
    if args.config:
        # referenced files are relative to the run config, not the working directory
        for key in ("env_config_path", "model_config_path"):
            value = getattr(config, key)
            if value is not None and not value.is_absolute():
                updates[key] = args.config.parent / value
    if args.env_config:
        updates["env_config_path"] = args.env_config
    if args.model_config:
        updates["model_config_path"] = args.model_config
    if args.out:
        updates["out_dir"] = args.out
    config = config.model_copy(update=updates).resolved()

    if args.oracle and args.arch == "bc":
        raise ConfigError("--oracle needs a latent encoder; it cannot be combined with --arch bc")
    overrides = {
        "seed": args.seed,
        "env.noise": None if args.noise is None else args.noise == "on",
        "model.arch": ARCH_FLAGS.get(args.arch),
        "train.oracle": True if args.oracle else None,
        # dagger fine-tunes after every episode; the other commands train from scratch
        EPOCH_KEYS.get(args.command, "train.train_epochs"): args.epochs,
        "dagger.budget": args.budget,
        "evaluation.n_episodes": args.episodes,
        "evaluation.trials_per_count": args.trials,
        "evaluation.demo_counts": args.demo_counts,
        "evaluation.workers": args.workers,
    }
    return apply_overrides(config, overrides)


def make_run_dir(config: RunConfig, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = Path(config.out_dir) / f"{stamp}-seed{config.seed}-{command}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json_config(config, run_dir / "resolved_config.json")
    return run_dir


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------

def _require(value: Optional[Path], flag: str, command: str) -> Path:
    if value is None:
        raise ConfigError(f"{command} needs {flag}")
    if not value.exists():
        raise ConfigError(f"{flag} file not found: {value}")
    return value


def _templates(args, config: RunConfig, env: TactileEnv, run_dir: Path):
    if args.templates:
        return load_templates(_require(args.templates, "--templates", args.command))
    rng = np.random.default_rng([config.seed, 11])
    templates = collect_exploration_templates(config.dagger.n_templates, rng, env, config.dagger.explore_length)
    save_templates(templates, run_dir / "templates.json")
    return templates


def _model(args, config: RunConfig):
    path = _require(args.checkpoint, "--checkpoint", args.command)
    expected = config.model if config.model_config_path is not None else None
    model = load_model(path, expected)
    if args.arch and model.config.arch != ARCH_FLAGS[args.arch]:
        raise CheckpointError(f"checkpoint holds a {model.config.arch} model, --arch asked for {args.arch}")
    return model


def _dataset(args) -> Dataset:
    return Dataset.load(_require(args.dataset, "--dataset", args.command))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_collect_templates(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    rng = np.random.default_rng([config.seed, 11])
    templates = collect_exploration_templates(config.dagger.n_templates, rng, env, config.dagger.explore_length)
    path = save_templates(templates, run_dir / "templates.json")
    return {"templates": str(path), "count": len(templates), "styles": [t.style for t in templates]}


def cmd_collect_demos(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    n = args.episodes or max(config.evaluation.demo_counts)
    expert = OraclePolicy(config.model.max_M)
    master = np.random.default_rng([config.seed, 13])
    dataset = Dataset()
    for _ in range(n):
        outcome = run_episode(env, templates, expert, int(master.integers(0, 2 ** 31 - 1)))
        dataset.append(record_from_episode(outcome, outcome.skill, "expert"))
    path = dataset.save(run_dir / "dataset.jsonl")
    return {"dataset": str(path), "records": len(dataset)}


def cmd_train(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    dataset = _dataset(args)
    scaler = FeatureScaler.from_env(config.env)
    model, history = train_model(config.model, dataset, scaler, config.train, config.seed, progress=True)
    path = save_model(model, run_dir / "model.ckpt")
    rows = [{"epoch": i + 1, "loss": loss} for i, loss in enumerate(history.epoch_losses)]
    write_report("training", {"epoch_losses": history.epoch_losses}, rows, run_dir)
    return {"checkpoint": str(path), "final_loss": history.final_loss}


def cmd_dagger(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    scaler = FeatureScaler.from_env(config.env)
    model = _model(args, config) if args.checkpoint else build_model(config.model)
    dataset = _dataset(args) if args.dataset else Dataset()
    policy = ModelPolicy(model, scaler, config.dagger.generate_mode)
    tune_rng = np.random.default_rng([config.seed, 5])

    def _evaluate(iteration: int) -> float:
        return evaluate(policy, env, templates, config.dagger.eval_episodes, config.seed,
                        config.evaluation.workers).success_rate

    def _checkpoint(iteration: int) -> Path:
        return save_model(model, run_dir / f"checkpoint-{iteration:03d}.ckpt")

    result = dagger_run(
        env, policy, templates, config.dagger, config.seed,
        dataset=dataset,
        update=lambda ds: fine_tune(model, ds, scaler, config.train, tune_rng),
        evaluate=_evaluate,
        checkpoint=_checkpoint,
        run_logger=RunLogger(args.run_log or run_dir / "run_log.jsonl"),
        progress=True,
    )
    dataset_path = result.dataset.save(run_dir / "dataset.jsonl")
    checkpoint = save_model(model, run_dir / "model.ckpt")
    return {
        "dataset": str(dataset_path),
        "checkpoint": str(checkpoint),
        "records": len(result.dataset),
        "expert_records": result.dataset.count("expert"),
        "stopped_by": result.stopped_by,
        "interactions": result.interactions,
    }


def cmd_eval(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    if args.policy == "expert":
        policy = OraclePolicy(config.model.max_M)
    else:
        policy = ModelPolicy(_model(args, config), FeatureScaler.from_env(config.env), config.dagger.generate_mode)
    report = evaluate(policy, env, templates, config.evaluation.n_episodes, config.seed,
                      config.evaluation.workers, progress=True)
    write_report("eval_report", report, report.per_episode, run_dir)
    return {"success_rate": report.success_rate, "n_episodes": report.n_episodes}


def cmd_ablate_demos(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    rows = demo_ablation(_dataset(args), config.evaluation.demo_counts, config.evaluation.trials_per_count,
                         env, templates, config, FeatureScaler.from_env(config.env), config.seed,
                         progress=True)
    write_report("demo_ablation", rows, rows, run_dir)
    return {"points": len(rows)}


def cmd_estimate_state(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    curve = state_estimation_curve(_model(args, config), env, templates, FeatureScaler.from_env(config.env),
                                   config.evaluation.n_episodes, config.seed)
    rows = [{"step": i + 1, "mse": v} for i, v in enumerate(curve.mse)]
    write_report("state_estimation", curve, rows, run_dir)
    return {"mse_first": curve.mse[0], "mse_last": curve.mse[-1], "warning": curve.warning}


def cmd_replay(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    dataset = _dataset(args)
    templates = load_templates(_require(args.templates, "--templates", args.command))
    indices = range(len(dataset)) if args.index is None else [args.index]
    rows = []
    for i in indices:
        result = replay_record(env, dataset[i], templates)
        rows.append({"index": i, "seed": dataset[i].seed, "matches": result.matches,
                     "hidden_matches": result.hidden_matches, "first_mismatch": result.first_mismatch})
    write_report("replay", rows, rows, run_dir)
    mismatched = [r["index"] for r in rows if not r["matches"]]
    if mismatched:
        logger.warning(f"{len(mismatched)} record(s) did not replay identically: {mismatched[:10]}")
    return {"replayed": len(rows), "mismatched": len(mismatched)}


def cmd_compare(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    rows = baseline_comparison(_dataset(args), env, templates, config, FeatureScaler.from_env(config.env),
                               config.evaluation.n_episodes, config.seed, progress=True)
    write_report("baseline_comparison", rows, rows, run_dir)
    return {row.method: row.success_rate for row in rows}


def cmd_efficiency(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    rows = sample_efficiency_report(load_run_log(_require(args.run_log, "--run-log", args.command)))
    write_report("sample_efficiency", rows, rows, run_dir)
    return {"iterations": len(rows), "interactions": rows[-1].interactions if rows else 0}


def cmd_repeatability(args, config: RunConfig, env: TactileEnv, run_dir: Path) -> Dict[str, Any]:
    templates = _templates(args, config, env, run_dir)
    policy = ModelPolicy(_model(args, config), FeatureScaler.from_env(config.env), config.dagger.generate_mode)
    rows = repeatability(policy, env, templates, config.evaluation.repeatability_poses,
                         config.evaluation.repeatability_runs, config.seed)
    write_report("repeatability", rows, rows, run_dir)
    return {row.pose: row.success_rate for row in rows}


COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "collect-templates": cmd_collect_templates,
    "collect-demos": cmd_collect_demos,
    "train": cmd_train,
    "dagger": cmd_dagger,
    "eval": cmd_eval,
    "ablate-demos": cmd_ablate_demos,
    "estimate-state": cmd_estimate_state,
    "replay": cmd_replay,
    "compare": cmd_compare,
    "efficiency": cmd_efficiency,
    "repeatability": cmd_repeatability,
}

COMMAND_HELP = {
    "collect-templates": "generate and store exploration templates",
    "collect-demos": "record oracle demonstrations into a dataset",
    "train": "train a model from scratch on a dataset",
    "dagger": "incremental training with oracle corrections",
    "eval": "success rate over random target poses",
    "ablate-demos": "success versus number of training demonstrations",
    "estimate-state": "hidden-pose estimation error per exploration step",
    "replay": "re-execute dataset records and compare observations",
    "compare": "train and evaluate every baseline on the same data",
    "efficiency": "interactions versus success from a DAgger run log",
    "repeatability": "repeated runs at fixed target poses",
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    run_dir: Optional[Path] = None
    try:
        config = resolve_config(args)
        run_dir = make_run_dir(config, args.command)
        env = TactileEnv(config.env)
        logger.info(f"Running {args.command} in {run_dir}")
        summary = COMMANDS[args.command](args, config, env, run_dir)
        summary["run_dir"] = str(run_dir)
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(json.dumps(summary, indent=2))
        print(f"✅ {args.command} finished: {run_dir}")
        return 0
    except (Seq2SeqError, OSError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        _write_error(exc, args, run_dir)
        return 2 if isinstance(exc, ConfigError) else 1
    except Exception as exc:
        logger.exception(f"{args.command} failed unexpectedly: {exc}")
        _write_error(exc, args, run_dir)
        return 1


def _write_error(exc: BaseException, args: argparse.Namespace, run_dir: Optional[Path]) -> None:
    """Emit the error record on stderr and as error.json in the run (or --out) directory."""
    record = error_record(exc, args.command)
    print(json.dumps(record, indent=2), file=sys.stderr)
    target = Path(run_dir or args.out or ".")
    try:
        target.mkdir(parents=True, exist_ok=True)
        (target / "error.json").write_text(json.dumps(record, indent=2) + "\n")
    except OSError:
        logger.debug("could not write error.json")


if __name__ == "__main__":
    sys.exit(main())
