"""Command-line surface: demonstration collection, training, evaluation,
ablations, metrics export, and raw trajectory dumps."""
from __future__ import annotations

import argparse
import dataclasses
import glob
import os
import sys

import numpy as np

from . import agent, cloth, harness, nmpc
from .harness import ExperimentConfig
from .tasks import ClothEnv, EpisodeConfig, TaskKind


def parse_config_file(path: str) -> dict[str, str]:
    """`key = value` lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def apply_overrides(instance, overrides: dict[str, str], used: set[str]):
    """Replace dataclass fields named in `overrides`; records consumed keys."""
    changes = {}
    for f in dataclasses.fields(instance):
        if f.name in overrides:
            t = f.type if isinstance(f.type, type) else type(getattr(instance, f.name))
            changes[f.name] = _coerce(overrides[f.name], t)
            used.add(f.name)
    return dataclasses.replace(instance, **changes) if changes else instance


def _load_overrides(args) -> dict[str, str]:
    return parse_config_file(args.config) if args.config else {}


def _build_experiment(args, overrides: dict[str, str], used: set[str]) -> ExperimentConfig:
    task = TaskKind(args.task)
    agent_cfg = agent.AgentConfig.for_preset(args.preset)
    agent_cfg = apply_overrides(agent_cfg, overrides, used)
    # Only pin solver settings when the config file actually names one;
    # otherwise demonstration collection keeps its tuned defaults.
    nmpc_cfg = apply_overrides(nmpc.NmpcConfig(), overrides, used)
    if not any(f.name in overrides for f in dataclasses.fields(nmpc.NmpcConfig)):
        nmpc_cfg = None
    episode_cfg = apply_overrides(EpisodeConfig(task=task), overrides, used)
    exp = ExperimentConfig(
        name=overrides.get("name", f"{task.value}-p{args.preset}"),
        task=task,
        preset=args.preset,
        mode=overrides.get("mode", "simple"),
        demo_rounds=int(overrides.get("demo_rounds", 20)),
        demo_seed=int(overrides.get("demo_seed", args.seed)),
        demo_path=getattr(args, "demos", None),
        seeds=tuple(int(s) for s in overrides.get("seeds", str(args.seed)).split(",")),
        agent=agent_cfg,
        nmpc=nmpc_cfg,
        episode=episode_cfg,
    )
    for key in ("name", "mode", "demo_rounds", "demo_seed", "seeds"):
        used.add(key)
    _check_unused(overrides, used)
    return exp


def _check_unused(overrides: dict[str, str], used: set[str]) -> None:
    unknown = set(overrides) - used
    if unknown:
        raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")


def cmd_collect_nmpc(args) -> None:
    overrides = _load_overrides(args)
    used: set[str] = set()
    task = TaskKind(args.task)
    nmpc_cfg = apply_overrides(nmpc.NmpcConfig(), overrides, used)
    if not any(f.name in overrides for f in dataclasses.fields(nmpc.NmpcConfig)):
        nmpc_cfg = None
    episode_cfg = apply_overrides(EpisodeConfig(task=task), overrides, used)
    episodes = int(overrides.get("demo_rounds", args.episodes))
    used.add("demo_rounds")
    _check_unused(overrides, used)
    rng = np.random.default_rng(args.seed)
    demos = nmpc.collect_demos(
        task, episodes, rng, nmpc_config=nmpc_cfg,
        env_factory=lambda: ClothEnv(episode_cfg),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "demos.txt")
    harness.save_dataset(demos, out)
    print(f"collected {len(demos)} accepted episodes -> {out}")
    for i, ep in enumerate(demos.episodes):
        print(f"episode {i}: steps={len(ep.transitions)} final_reward={ep.final_reward:.9g}")


def cmd_train(args) -> None:
    overrides = _load_overrides(args)
    used: set[str] = set()
    exp = _build_experiment(args, overrides, used)
    record = harness.run_experiment(exp, args.out_dir)
    m = record.metrics
    print(f"R_avg={m.overall_mean:.9g} sigma_avg={m.std_mean:.9g}")
    for t, (at, mean) in enumerate(zip(record.test_rounds_at, m.epoch_mean)):
        print(f"epoch {t} (round {at}): R_avg_t={mean:.9g} sigma_t={m.epoch_std[t]:.9g}")


def cmd_eval(args) -> None:
    models = harness.load_agent(args.checkpoint)
    task = TaskKind(args.task)
    env = ClothEnv(EpisodeConfig(task=task))
    rng = np.random.default_rng(args.seed)
    rewards = agent.evaluate(models, env, args.episodes, rng)
    for i, r in enumerate(rewards):
        print(f"episode {i}: reward={r:.9g}")
    print(f"mean={np.mean(rewards):.9g}")


def cmd_ablate(args) -> None:
    overrides = _load_overrides(args)
    presets = [int(p) for p in args.presets.split(",")]
    records = []
    for preset in presets:
        used: set[str] = set()
        ns = argparse.Namespace(**{**vars(args), "preset": preset})
        exp = _build_experiment(ns, overrides, used)
        records.append(harness.run_experiment(exp, args.out_dir))
    rank_mean, rank_std = harness.rankings(
        [r.metrics.overall_mean for r in records],
        [r.metrics.std_mean for r in records],
    )
    print("preset,R_avg,sigma_avg,rank_avg,rank_sigma")
    for rec, rm, rs in zip(records, rank_mean, rank_std):
        print(f"{rec.config.preset},{rec.metrics.overall_mean:.9g},"
              f"{rec.metrics.std_mean:.9g},{rm},{rs}")
    plot = os.path.join(args.out_dir, records[0].config.name, "comparison.png")
    harness.plot_comparison(records, plot)
    print(f"comparison plot -> {plot}")


def cmd_metrics(args) -> None:
    paths = sorted(glob.glob(os.path.join(args.run_dir, "seed*", "metrics.txt")))
    if not paths:
        raise SystemExit(f"no seed*/metrics.txt under {args.run_dir}")
    rounds_at = None
    raw = []
    for p in paths:
        rounds, rows = harness.load_seed_rewards(p)
        raw.append(rows)
        rounds_at = rounds_at or rounds
    metrics = harness.reward_metrics(np.asarray(raw))
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write("epoch,R_avg_t,sigma_t\n")
        for t, (mean, std) in enumerate(zip(metrics.epoch_mean, metrics.epoch_std)):
            fh.write(f"{t},{format(mean, '.9g')},{format(std, '.9g')}\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.asarray(rounds_at)
    mean = harness.smooth3(metrics.epoch_mean)
    std = harness.smooth3(metrics.epoch_std)
    ax.plot(x, mean)
    ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("training round")
    ax.set_ylabel("mean test reward (window-3 smoothed)")
    fig.tight_layout()
    png_path = os.path.join(args.out_dir, "reward_curve.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    print(f"R_avg={metrics.overall_mean:.9g} sigma_avg={metrics.std_mean:.9g}")
    print(f"csv -> {csv_path}")
    print(f"plot -> {png_path}")


def cmd_sim_dump(args) -> None:
    overrides = _load_overrides(args)
    used: set[str] = set()
    task = TaskKind(args.task)
    episode_cfg = apply_overrides(EpisodeConfig(task=task), overrides, used)
    _check_unused(overrides, used)
    env = ClothEnv(episode_cfg)
    rng = np.random.default_rng(args.seed)
    env.reset(rng)
    corner = env.state.positions[0]
    target = np.array([0.0, 0.0, 0.0])
    _, trajectory = cloth.execute_pick_place(
        env.state, corner, target, env.topo, env.params, env.motion
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "trajectory.txt")
    with open(out, "w") as fh:
        cloth.dump_trajectory(trajectory, fh)
    print(f"{len(trajectory)} states -> {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clothlab",
        description="Desk-scale cloth manipulation lab: simulator, NMPC "
                    "demonstrations, demonstration-enhanced RL, and metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--task", default="diagonal",
                       choices=[t.value for t in TaskKind])
        if preset:
            p.add_argument("--preset", type=int, default=1, choices=range(1, 9))

    p = sub.add_parser("collect-nmpc", help="collect NMPC demonstration episodes")
    common(p)
    p.add_argument("--episodes", type=int, default=20)
    p.set_defaults(func=cmd_collect_nmpc)

    p = sub.add_parser("train", help="train one preset (all configured seeds)")
    common(p, preset=True)
    p.add_argument("--demos", help="demonstration dataset file (collected if omitted)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run and rank several presets")
    common(p, preset=True)
    p.add_argument("--presets", default="1,8", help="comma-separated preset list")
    p.add_argument("--demos", help="demonstration dataset file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="recompute metrics from raw reward files")
    common(p)
    p.add_argument("--run-dir", required=True,
                   help="directory containing seed*/metrics.txt")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sim-dump", help="dump a pick-and-place trajectory")
    common(p)
    p.set_defaults(func=cmd_sim_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
