"""Command-line entry point.

Verbs: train, eval, pca, subspace-sample, transfer, export-w.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_agent
from .config import build_run_config, load_yaml
from .envs import build_suite, suite_from_config
from .errors import ConfigError
from .training import TrainConfig, Trainer, evaluate, transfer_run


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--checkpoint", help="checkpoint file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=None, help="output directory")
    parser.add_argument("--variant", choices=["paco", "maskout", "vanilla"], default=None)
    parser.add_argument("--scope", choices=["ac-shared", "actor-only", "output-only"],
                        default=None)
    parser.add_argument("--k", type=int, default=None, help="parameter-set size")
    parser.add_argument("--normalize-w", action="store_true", default=None,
                        help="unit-normalize task vectors before composition")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskspan",
        description="Multi-task RL with task policies composed from a shared parameter set",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its suite")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("pca", help="2-D PCA projection of the task vectors")
    _add_common(p)

    p = sub.add_parser("subspace-sample", help="roll out policies sampled on the "
                                               "unit circle of a k=2 subspace")
    _add_common(p)
    p.add_argument("--angles", type=int, default=36, help="number of sweep angles")
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("transfer", help="train a new task vector against a frozen basis")
    _add_common(p)
    p.add_argument("--new-task", default="reach",
                   help="skill name from the checkpoint's suite to copy as the new task")
    p.add_argument("--steps", type=int, default=20000)

    p = sub.add_parser("export-w", help="write the K x T compositional matrix as CSV")
    _add_common(p)
    return parser


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "variant": args.variant,
        "scope": args.scope,
        "k": args.k,
        "normalize_w": args.normalize_w,
    }


def _load_run_config(args):
    data = load_yaml(args.config) if args.config else {}
    return build_run_config(data, overrides=_overrides(args))


def _require_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return load_agent(args.checkpoint)


def _suite_from_meta(meta: dict):
    names = meta.get("suite")
    onehot = meta.get("onehot_size")
    if not names or onehot is None:
        raise ConfigError("checkpoint does not carry suite metadata; pass --config")
    for builtin in ("tri-task", "deca-task"):
        specs, size = build_suite(builtin, goal_mode="random", onehot_size=onehot)
        if [s.name for s in specs] == list(names):
            return specs, size
    raise ConfigError("checkpoint suite is not a builtin; pass --config")


def cmd_train(args) -> int:
    config, specs, onehot = _load_run_config(args)
    out = _out_dir(args, "runs/train")
    trainer = Trainer(config, specs, onehot, out_dir=out)
    record = trainer.train()
    print(f"run directory: {out}")
    print(f"env steps: {record.env_steps}  wall clock: {record.wall_clock:.1f}s")
    for name, rate in record.final_eval["per_skill"].items():
        print(f"  success[{name}] = {rate:.2f}")
    print(f"  mean success = {record.final_eval['mean']:.3f}")
    return 0


def cmd_eval(args) -> int:
    agent, meta = _require_checkpoint(args)
    if args.config:
        data = load_yaml(args.config)
        specs, onehot = suite_from_config(data.get("suite", {"name": "tri-task"}))
    else:
        specs, onehot = _suite_from_meta(meta)
    seed = args.seed if args.seed is not None else 0
    result = evaluate(agent, specs, onehot, episodes=args.episodes, seed=seed)
    for name, rate in result["per_skill"].items():
        print(f"success[{name}] = {rate:.2f}")
    print(f"mean success = {result['mean']:.3f}")
    return 0


def cmd_pca(args) -> int:
    agent, meta = _require_checkpoint(args)
    labels = meta.get("suite") or [f"task{i}" for i in range(agent.task_count)]
    proj = analysis.pca_of_w(agent.w.as_matrix(), labels=labels)
    out = _out_dir(args, "runs/analysis")
    path = out / "pca_coords.csv"
    analysis.write_pca_csv(proj, path)
    summary = {
        "explained_variance_ratio": [float(v) for v in proj.explained_variance_ratio],
        "mean": [float(v) for v in proj.mean],
        "components": [[float(v) for v in row] for row in proj.components],
    }
    (out / "pca_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {path}")
    print("explained variance ratios:",
          ", ".join(f"{v:.4f}" for v in proj.explained_variance_ratio))
    return 0


def cmd_subspace_sample(args) -> int:
    agent, meta = _require_checkpoint(args)
    specs, onehot = _suite_from_meta(meta)
    seed = args.seed if args.seed is not None else 0
    angles = np.linspace(0.0, 2.0 * np.pi, args.angles, endpoint=False)
    samples = [
        analysis.sample_subspace_angle(agent, a, specs, onehot,
                                       episodes=args.episodes, seed=seed)
        for a in angles
    ]
    out = _out_dir(args, "runs/analysis")
    path = out / "subspace_sweep.csv"
    analysis.write_subspace_csv(samples, path)
    best = max(samples, key=lambda s: s.mean_success)
    print(f"wrote {path}")
    print(f"best angle {best.angle:.3f} rad with mean success {best.mean_success:.2f}")
    return 0


def cmd_transfer(args) -> int:
    agent, meta = _require_checkpoint(args)
    specs, onehot = _suite_from_meta(meta)
    by_name = {s.name: s for s in specs}
    if args.new_task not in by_name:
        raise ConfigError(
            f"--new-task {args.new_task!r} not in suite {sorted(by_name)}"
        )
    new_spec = by_name[args.new_task]
    seed = args.seed if args.seed is not None else 0
    config = TrainConfig(
        total_steps=args.steps, k=agent.k, hidden=agent.hidden, scope=agent.scope,
        normalize_w=agent.w.normalize, batch_size=256, parallel_envs=4,
        exploration_steps=1000, eval_interval=max(args.steps // 10, 500),
        seed=seed, variant="paco", lr=agent.lr, gamma=agent.gamma,
    )
    out = _out_dir(args, "runs/transfer")
    record, new_id = transfer_run(agent, new_spec, onehot, config, out_dir=out)
    result = record.final_eval
    print(f"new task id {new_id} trained for {record.env_steps} steps (basis frozen)")
    print(f"success[{new_spec.name}] = {result['mean']:.2f}")
    return 0


def cmd_export_w(args) -> int:
    agent, meta = _require_checkpoint(args)
    labels = meta.get("suite") or [f"task{i}" for i in range(agent.task_count)]
    if len(labels) < agent.task_count:
        labels = list(labels) + [f"task{i}" for i in range(len(labels), agent.task_count)]
    out = _out_dir(args, "runs/analysis")
    path = out / "w_matrix.csv"
    analysis.write_w_csv(agent.w.as_matrix(), labels, path)
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pca": cmd_pca,
    "subspace-sample": cmd_subspace_sample,
    "transfer": cmd_transfer,
    "export-w": cmd_export_w,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
