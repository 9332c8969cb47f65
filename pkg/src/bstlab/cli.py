"""Command-line entry point.

Six subcommands cover the full pipeline: gen-data, train-morse, train-agent,
evaluate, analyze-morse, ablate.  Every subcommand takes --config (a JSON
run configuration), --seed (master seed, fanned out to phases through the
run manifest), and --out (run directory).  Each run leaves a manifest.json
naming every artifact it produced.

Exit codes: 0 success, 1 configuration/argument error, 2 runtime error.
Corrupt or missing input artifacts count as configuration errors; numeric
failures and broken invariants mid-run are runtime errors.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from sklearn.exceptions import NotFittedError

from .agent import BCPolicy, NormalizedPolicy, TD3BST, evaluate
from .analysis import (
    AblationSpec,
    ablate_agent_param,
    ablate_cdq,
    ablate_lambda,
    analyze_morse,
    deviation_histogram,
    emit_heatmap,
    write_rows_csv,
)
from .config import env_spec_from, load_config, resolve_path, section_params
from .datasets import four_mode_dataset, load_dataset, save_dataset
from .envs import generate_maze_dataset, make_env
from .errors import ConfigError
from .manifest import RunManifest
from .morse import MorseNet
from .nn import load_net, save_adam, save_net

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    # Usage problems are configuration errors: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bstlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    commands = (
        ("gen-data", _cmd_gen_data, "generate a dataset from the env section"),
        ("train-morse", _cmd_train_morse, "train an uncertainty model on a dataset"),
        ("train-agent", _cmd_train_agent, "train a policy (td3bst or bc) offline"),
        ("evaluate", _cmd_evaluate, "roll out a saved policy in the environment"),
        (
            "analyze-morse",
            _cmd_analyze_morse,
            "certainty discrimination table for a trained model",
        ),
        ("ablate", _cmd_ablate, "run the sweep described by the ablation section"),
    )
    for name, handler, help_text in commands:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument(
            "--out", default=".", help="output directory (default: current)"
        )
        p.set_defaults(handler=handler)
    return parser


def _start(args):
    config = load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out_dir, config, args.seed)
    manifest.add_input("config", args.config)
    return config, manifest


def _load_dataset_input(config, manifest, args):
    path = config.get("dataset", {}).get("path")
    if path is None:
        raise ConfigError("config needs dataset.path pointing at a dataset file")
    resolved = resolve_path(args.config, path)
    if not resolved.is_file():
        raise ConfigError(f"dataset file not found: {resolved}")
    manifest.add_input("dataset", resolved)
    return load_dataset(resolved)


def _load_morse_input(config, manifest, args):
    path = config.get("morse", {}).get("path")
    if path is None:
        raise ConfigError("config needs morse.path pointing at a trained model")
    resolved = resolve_path(args.config, path)
    if not resolved.is_file():
        raise ConfigError(f"morse model file not found: {resolved}")
    manifest.add_input("morse", resolved)
    return MorseNet.load(resolved)


def _cmd_gen_data(args) -> None:
    config, manifest = _start(args)
    spec = env_spec_from(config)
    ds_cfg = config.get("dataset", {})
    seed = manifest.derive_seed("generate")
    with manifest.phase("generate"):
        if spec.kind == "four_mode_bandit":
            dataset = four_mode_dataset(ds_cfg.get("n_transitions", 128), seed)
        else:
            extra = {
                k: ds_cfg[k]
                for k in ("noise_scale", "waypoint_radius")
                if k in ds_cfg
            }
            dataset = generate_maze_dataset(
                spec, ds_cfg.get("n_episodes", 500), seed, **extra
            )
    save_dataset(dataset, manifest.add_artifact("dataset.bstd"))
    manifest.extra["n_transitions"] = len(dataset)
    manifest.extra["source"] = dataset.source_manifest
    manifest.write()


def _cmd_train_morse(args) -> None:
    config, manifest = _start(args)
    dataset = _load_dataset_input(config, manifest, args)
    seed = manifest.derive_seed("train_morse")
    model = MorseNet(**section_params(config, "morse"), seed=seed)
    with manifest.phase("train_morse"):
        model.fit(dataset.states, dataset.actions)
    model.save(manifest.add_artifact("morse.bstm"))
    write_rows_csv(
        manifest.add_artifact("morse_loss.csv"),
        ("step", "loss"),
        (
            {"step": i, "loss": float(v)}
            for i, v in enumerate(model.loss_history_)
        ),
    )
    if len(model.loss_history_):
        manifest.extra["final_loss"] = float(model.loss_history_[-1])
    manifest.write()


def _save_policy_files(manifest, policy_net, state_mean, state_std):
    save_net(policy_net, manifest.add_artifact("policy.bstw"))
    normalizer = {
        "state_mean": [float(v) for v in state_mean],
        "state_std": [float(v) for v in state_std],
    }
    manifest.add_artifact("normalizer.json").write_text(
        json.dumps(normalizer, indent=2) + "\n"
    )


def _cmd_train_agent(args) -> None:
    config, manifest = _start(args)
    dataset = _load_dataset_input(config, manifest, args)
    agent_cfg = config.get("agent", {})
    kind = agent_cfg.get("kind", "td3bst")
    params = section_params(config, "agent")
    seed = manifest.derive_seed("train_agent")

    if kind == "td3bst":
        morse = None
        if params.get("regularizer", "bst") == "bst":
            morse = _load_morse_input(config, manifest, args)
        agent = TD3BST(**params, morse=morse, seed=seed)
        env = None
        if "env" in config and agent.eval_every and agent.n_steps:
            env = make_env(env_spec_from(config))
        with manifest.phase("train_agent"):
            agent.fit(dataset, env=env)
        _save_policy_files(
            manifest, agent.policy_net_, agent.state_mean_, agent.state_std_
        )
        save_net(agent.policy_target_, manifest.add_artifact("policy_target.bstw"))
        save_adam(
            agent.policy_opt_, agent.policy_net_,
            manifest.add_artifact("policy_opt.bsto"),
        )
        ens = agent.critics_
        for i, (net, target, opt) in enumerate(zip(ens.nets, ens.targets, ens.opts)):
            save_net(net, manifest.add_artifact(f"critic_{i}.bstw"))
            save_net(target, manifest.add_artifact(f"critic_target_{i}.bstw"))
            save_adam(opt, net, manifest.add_artifact(f"critic_opt_{i}.bsto"))
        eval_by_step = {row["step"]: row["mean_return"] for row in agent.eval_history_}
        write_rows_csv(
            manifest.add_artifact("metrics.csv"),
            ("step", "critic_loss", "policy_loss", "mean_w", "mean_c", "z_q",
             "eval_return"),
            (
                {**row, "eval_return": eval_by_step.get(row["step"])}
                for row in agent.metrics_
            ),
        )
        if agent.eval_history_:
            write_rows_csv(
                manifest.add_artifact("eval_history.csv"),
                ("step", "mean_return", "success_rate"),
                agent.eval_history_,
            )
        for message in agent.warnings_:
            manifest.warn(message)
        manifest.extra["updates"] = {
            "critic": agent.n_critic_updates_,
            "policy": agent.n_policy_updates_,
            "soft": agent.n_soft_updates_,
        }
    elif kind == "bc":
        weighting = agent_cfg.get("weighting", "none")
        allowed = set(BCPolicy._get_param_names()) - {"seed", "morse", "weighting"}
        unknown = set(params) - allowed
        if unknown:
            raise ConfigError(
                f"agent key(s) {sorted(unknown)} do not apply to kind 'bc'"
            )
        morse = None
        if weighting == "morse":
            morse = _load_morse_input(config, manifest, args)
        agent = BCPolicy(**params, weighting=weighting, morse=morse, seed=seed)
        with manifest.phase("train_agent"):
            agent.fit(dataset)
        _save_policy_files(
            manifest, agent.policy_net_, agent.state_mean_, agent.state_std_
        )
        write_rows_csv(
            manifest.add_artifact("metrics.csv"),
            ("step", "loss"),
            (
                {"step": i, "loss": float(v)}
                for i, v in enumerate(agent.loss_history_)
            ),
        )
    else:
        raise ConfigError(f"agent.kind must be 'td3bst' or 'bc', got {kind!r}")
    manifest.write()


def _load_policy(config, manifest, args) -> NormalizedPolicy:
    path = config.get("agent", {}).get("path")
    if path is None:
        raise ConfigError("config needs agent.path pointing at a policy checkpoint")
    resolved = resolve_path(args.config, path)
    if not resolved.is_file():
        raise ConfigError(f"policy checkpoint not found: {resolved}")
    manifest.add_input("policy", resolved)
    normalizer_path = resolved.parent / "normalizer.json"
    if not normalizer_path.is_file():
        raise ConfigError(
            f"normalizer.json not found next to the policy: {normalizer_path}"
        )
    manifest.add_input("normalizer", normalizer_path)
    stats = json.loads(normalizer_path.read_text())
    return NormalizedPolicy(
        load_net(resolved),
        np.asarray(stats["state_mean"], dtype=np.float64),
        np.asarray(stats["state_std"], dtype=np.float64),
    )


def _cmd_evaluate(args) -> None:
    config, manifest = _start(args)
    env = make_env(env_spec_from(config))
    policy = _load_policy(config, manifest, args)
    # Final-report convention: 100 episodes unless the config says otherwise.
    episodes = config.get("agent", {}).get("eval_episodes", 100)
    dataset = None
    if config.get("dataset", {}).get("path"):
        dataset = _load_dataset_input(config, manifest, args)
    seed = manifest.derive_seed("evaluate")
    with manifest.phase("evaluate"):
        result = evaluate(policy, env, episodes, seed=seed, dataset=dataset)
    write_rows_csv(
        manifest.add_artifact("evaluation.csv"),
        ("episode", "episode_return", "length"),
        (
            {
                "episode": i,
                "episode_return": float(result.returns[i]),
                "length": int(result.lengths[i]),
            }
            for i in range(episodes)
        ),
    )
    if result.deviations is not None:
        write_rows_csv(
            manifest.add_artifact("deviations.csv"),
            ("bin_left", "bin_right", "count"),
            deviation_histogram(result.deviations, dataset.actions.shape[1]),
        )
        manifest.extra["mean_deviation"] = float(result.deviations.mean())
    manifest.extra["mean_return"] = result.mean_return
    manifest.extra["success_rate"] = result.success_rate
    manifest.write()


def _cmd_analyze_morse(args) -> None:
    config, manifest = _start(args)
    model = _load_morse_input(config, manifest, args)
    dataset = _load_dataset_input(config, manifest, args)
    seed = manifest.derive_seed("analyze")
    with manifest.phase("analyze"):
        result = analyze_morse(
            model, dataset, seed=seed, path=manifest.add_artifact("certainty.csv")
        )
        if model.action_dim_ == 2:
            grid = model.density_grid(dataset.states.mean(axis=0))
            emit_heatmap(grid, manifest.add_artifact("density.pgm"))
            manifest.add_artifact("density.csv")
    manifest.extra["means"] = result["means"]
    manifest.write()


def _cmd_ablate(args) -> None:
    config, manifest = _start(args)
    if "ablation" not in config:
        raise ConfigError("config is missing the 'ablation' section")
    abl = config["ablation"]
    if "variable" not in abl or "values" not in abl:
        raise ConfigError("ablation section needs 'variable' and 'values'")
    values = abl["values"]
    spec = AblationSpec(
        variable=abl["variable"],
        values=[tuple(v) if isinstance(v, list) else v for v in values],
        n_seeds=abl.get("n_seeds", 3),
        morse_params=section_params(config, "morse"),
        agent_params=section_params(config, "agent"),
        eval_episodes=abl.get("eval_episodes", 100),
    )
    dataset = _load_dataset_input(config, manifest, args)
    env = make_env(env_spec_from(config))
    seed = manifest.derive_seed("ablate")
    with manifest.phase("ablate"):
        if spec.variable == "lambda":
            rows = ablate_lambda(
                spec, dataset, env, seed=seed, out_dir=manifest.out_dir
            )
            for value in spec.values:
                manifest.add_artifact(f"deviations_lambda_{float(value)!r}.csv")
        else:
            morse = None
            if config.get("morse", {}).get("path"):
                morse = _load_morse_input(config, manifest, args)
            if spec.variable == "cdq":
                rows = ablate_cdq(spec, dataset, env, morse, seed=seed)
            else:
                rows = ablate_agent_param(spec, dataset, env, morse, seed=seed)
    write_rows_csv(
        manifest.add_artifact("ablation.csv"), list(rows[0].keys()), rows
    )
    manifest.extra["n_arms"] = len(rows)
    manifest.write()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.handler(args)
    except (ValueError, NotFittedError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
