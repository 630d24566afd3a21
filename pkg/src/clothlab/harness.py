"""Experiment orchestration: multi-seed training runs, reward/similarity
metrics, line-oriented text persistence for datasets and models, CSV export,
and reward-curve plotting."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import agent, fuzzy, nmpc, nn
from .agent import AgentConfig, AgentModels, TrainResult
from .nmpc import DemoDataset, DemoEpisode, DemoRecord, NmpcConfig
from .tasks import ClothEnv, EpisodeConfig, TaskKind

DATASET_MAGIC = "CLOTHLAB-DATASET v1"
MODEL_MAGIC = "CLOTHLAB-MODEL v1"
FLOAT_FMT = ".9g"


class FormatError(Exception):
    """A persisted file does not match the expected text format."""


class ZeroVarianceError(Exception):
    """Pearson correlation is undefined for a constant sequence."""


# ---------------------------------------------------------------------------
# Reward metrics


@dataclass(frozen=True)
class RewardMetrics:
    raw: np.ndarray            # (seeds, epochs, rounds)
    per_seed_epoch: np.ndarray  # (seeds, epochs) mean over test rounds
    epoch_mean: np.ndarray     # (epochs,) mean over seeds
    overall_mean: float
    epoch_std: np.ndarray      # (epochs,) std over seeds
    std_mean: float


def reward_metrics(raw: np.ndarray) -> RewardMetrics:
    """Average-reward and dispersion statistics over (seeds, epochs, rounds)."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3:
        raise ValueError("raw rewards must have shape (seeds, epochs, rounds)")
    per_seed = raw.mean(axis=2)
    epoch_mean = per_seed.mean(axis=0)
    epoch_std = per_seed.std(axis=0)
    return RewardMetrics(
        raw=raw,
        per_seed_epoch=per_seed,
        epoch_mean=epoch_mean,
        overall_mean=float(epoch_mean.mean()),
        epoch_std=epoch_std,
        std_mean=float(epoch_std.mean()),
    )


def rankings(overall_means, std_means) -> tuple[np.ndarray, np.ndarray]:
    """Rank algorithms 1..n: by descending mean reward and ascending
    dispersion. Ties keep input order."""
    means = np.asarray(overall_means, dtype=float)
    stds = np.asarray(std_means, dtype=float)
    if means.shape != stds.shape:
        raise ValueError("mean and std vectors must have the same length")
    n = len(means)
    rank_mean = np.empty(n, dtype=int)
    rank_mean[np.argsort(-means, kind="stable")] = np.arange(1, n + 1)
    rank_std = np.empty(n, dtype=int)
    rank_std[np.argsort(stds, kind="stable")] = np.arange(1, n + 1)
    return rank_mean, rank_std


def smooth3(seq: np.ndarray) -> np.ndarray:
    """Centered moving average, window 3, shrinking at the ends. Plot-only."""
    x = np.asarray(seq, dtype=float)
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i - 1)
        hi = min(len(x), i + 2)
        out[i] = x[lo:hi].mean()
    return out


# ---------------------------------------------------------------------------
# Similarity measures


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("cosine similarity needs equal-length sequences")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVarianceError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Dynamic time warping with Euclidean point cost."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        raise ValueError("DTW needs non-empty sequences")
    D = np.full((la + 1, lb + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            cost = abs(a[i - 1] - b[j - 1])
            D[i, j] = cost + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[la, lb])


def pearson_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("Pearson correlation needs equal-length sequences")
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.linalg.norm(da))
    nb = float(np.linalg.norm(db))
    if na == 0.0 or nb == 0.0:
        raise ZeroVarianceError("Pearson correlation undefined for a constant sequence")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def similarity_metrics(seq_a, seq_b) -> tuple[float, float, float]:
    """(cosine similarity, DTW distance, Pearson correlation)."""
    return (
        cosine_similarity(seq_a, seq_b),
        dtw_distance(seq_a, seq_b),
        pearson_correlation(seq_a, seq_b),
    )


# ---------------------------------------------------------------------------
# Text persistence


def _f(v: float) -> str:
    return format(float(v), FLOAT_FMT)


def _write_header(fh, magic: str, entries: dict) -> None:
    fh.write(magic + "\n")
    for k, v in entries.items():
        fh.write(f"{k} = {v}\n")


def _read_header(lines: list[str], magic: str) -> tuple[dict, int]:
    if not lines or lines[0].strip() != magic:
        raise FormatError(f"expected first line {magic!r}")
    entries = {}
    i = 1
    while i < len(lines) and "=" in lines[i]:
        key, _, val = lines[i].partition("=")
        entries[key.strip()] = val.strip()
        i += 1
    return entries, i


def save_dataset(dataset: DemoDataset, path: str) -> None:
    """One record per line: state, grasp index, offset, placement, reward,
    next state, done flag. Episode boundaries are the done=1 records."""
    records = dataset.records()
    dim = len(records[0].state) if records else dataset.task.state_dim
    with open(path, "w") as fh:
        _write_header(fh, DATASET_MAGIC, {
            "task": dataset.task.value,
            "k": dataset.task.n_endpoints,
            "state_dim": dim,
            "count": len(records),
        })
        for r in records:
            fields = (
                [_f(v) for v in r.state]
                + [str(int(r.grasp_index))]
                + [_f(v) for v in r.delta]
                + [_f(v) for v in r.place]
                + [_f(r.reward)]
                + [_f(v) for v in r.next_state]
                + ["1" if r.done else "0"]
            )
            fh.write(" ".join(fields) + "\n")


def load_dataset(path: str) -> DemoDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header, start = _read_header(lines, DATASET_MAGIC)
    task = TaskKind(header["task"])
    dim = int(header["state_dim"])
    count = int(header["count"])
    episodes: list[DemoEpisode] = []
    current: list[DemoRecord] = []
    for line in lines[start:start + count]:
        parts = line.split()
        expected = dim + 1 + 3 + 3 + 1 + dim + 1
        if len(parts) != expected:
            raise FormatError(f"record has {len(parts)} fields, expected {expected}")
        i = 0
        state = np.array([float(x) for x in parts[i:i + dim]]); i += dim
        grasp = int(parts[i]); i += 1
        delta = np.array([float(x) for x in parts[i:i + 3]]); i += 3
        place = np.array([float(x) for x in parts[i:i + 3]]); i += 3
        rew = float(parts[i]); i += 1
        nxt = np.array([float(x) for x in parts[i:i + dim]]); i += dim
        done = parts[i] == "1"
        current.append(DemoRecord(state=state, grasp_index=grasp, delta=delta,
                                  place=place, reward=rew, next_state=nxt, done=done))
        if done:
            episodes.append(DemoEpisode(transitions=current, final_reward=rew))
            current = []
    if current:  # tolerate a truncated final episode
        episodes.append(DemoEpisode(transitions=current, final_reward=current[-1].reward))
    return DemoDataset(task=task, episodes=episodes)


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    fh.write(f"array {name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join(_f(v) for v in row) + "\n")


def _read_arrays(lines: list[str], start: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    i = start
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] != "array" or len(parts) != 4:
            raise FormatError(f"expected 'array <name> <rows> <cols>', got {lines[i]!r}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        data = np.array(
            [[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)]
        ).reshape(rows, cols)
        out[name] = data
        i += 1 + rows
    return out


def save_model(model, path: str) -> None:
    """Persist a dense network or fuzzy classifier as line-oriented text."""
    with open(path, "w") as fh:
        if isinstance(model, nn.DenseNet):
            _write_header(fh, MODEL_MAGIC, {
                "kind": "dense",
                "layers": model.n_layers,
                "residual_every": model.residual_every,
            })
            for i, (w, b) in enumerate(zip(model.weights, model.biases)):
                _write_array(fh, f"w{i}", w)
                _write_array(fh, f"b{i}", b[None, :])
        elif isinstance(model, fuzzy.HtskModel):
            _write_header(fh, MODEL_MAGIC, {"kind": "htsk"})
            _write_array(fh, "centers", model.centers)
            _write_array(fh, "log_widths", model.log_widths)
            _write_array(fh, "consequents", model.consequents)
        else:
            raise TypeError(f"cannot persist model of type {type(model).__name__}")


def load_model(path: str):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header, start = _read_header(lines, MODEL_MAGIC)
    arrays = _read_arrays(lines, start)
    kind = header.get("kind")
    if kind == "dense":
        n_layers = int(header["layers"])
        return nn.DenseNet(
            weights=[arrays[f"w{i}"] for i in range(n_layers)],
            biases=[arrays[f"b{i}"][0] for i in range(n_layers)],
            residual_every=int(header.get("residual_every", 0)),
        )
    if kind == "htsk":
        return fuzzy.HtskModel(
            centers=arrays["centers"],
            log_widths=arrays["log_widths"],
            consequents=arrays["consequents"],
        )
    raise FormatError(f"unknown model kind {kind!r}")


def save_agent(models: AgentModels, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        _write_header(fh, MODEL_MAGIC, {
            "kind": "agent",
            "selector": models.selector.kind.value,
            "cpl": int(models.config.cpl),
            "gabc": int(models.config.gabc),
            "state_dim": models.state_dim,
            "k": models.k,
            "delta_max": _f(models.bounds.delta_max),
        })
    save_model(models.actor, os.path.join(out_dir, "actor.txt"))
    save_model(models.critic, os.path.join(out_dir, "critic.txt"))
    sel = models.selector
    if sel.htsk is not None:
        save_model(sel.htsk, os.path.join(out_dir, "selector.txt"))
    elif sel.net is not None:
        save_model(sel.net, os.path.join(out_dir, "selector.txt"))


def load_agent(out_dir: str) -> AgentModels:
    """Restore a checkpoint written by save_agent (policy-side only: targets
    are reset to copies, good for evaluation and fine-tuning)."""
    with open(os.path.join(out_dir, "meta.txt")) as fh:
        header, _ = _read_header(fh.read().splitlines(), MODEL_MAGIC)
    if header.get("kind") != "agent":
        raise FormatError("meta.txt is not an agent checkpoint")
    kind = agent.SelectorKind(header["selector"])
    state_dim = int(header["state_dim"])
    k = int(header["k"])
    cfg = AgentConfig(selector=kind, cpl=bool(int(header["cpl"])),
                      gabc=bool(int(header["gabc"])))
    actor = load_model(os.path.join(out_dir, "actor.txt"))
    critic = load_model(os.path.join(out_dir, "critic.txt"))
    rng = np.random.default_rng(0)
    selector = agent.GraspSelector(kind, k, state_dim, cfg, rng)
    sel_path = os.path.join(out_dir, "selector.txt")
    if os.path.exists(sel_path):
        loaded = load_model(sel_path)
        if isinstance(loaded, fuzzy.HtskModel):
            selector.htsk = loaded
        else:
            selector.net = loaded
    bounds = agent.ActionBounds.for_side_length(2.0 * float(header["delta_max"]))
    return AgentModels(
        actor=actor, critic=critic, target_actor=actor.copy(),
        target_critic_1=critic.copy(), target_critic_2=critic.copy(),
        selector=selector, bounds=bounds, config=cfg,
        state_dim=state_dim, k=k,
    )


# ---------------------------------------------------------------------------
# Experiments


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: TaskKind
    preset: int = 1
    mode: str = "simple"             # "challenging" halves the operation cap
    demo_rounds: int = 20
    demo_seed: int = 0
    demo_path: str | None = None     # load instead of collecting
    seeds: tuple[int, ...] = (0, 1, 2)
    agent: AgentConfig | None = None
    nmpc: NmpcConfig | None = None   # None -> demonstration-tuned solver settings
    episode: EpisodeConfig | None = None

    def __post_init__(self):
        if not 1 <= self.preset <= 8:
            raise ValueError("preset must be in 1..8")
        if len(self.seeds) < 1:
            raise ValueError("at least one seed is required")
        if self.mode not in ("simple", "challenging"):
            raise ValueError("mode must be 'simple' or 'challenging'")

    def agent_config(self) -> AgentConfig:
        if self.agent is not None:
            return self.agent
        return AgentConfig.for_preset(self.preset)

    def episode_config(self) -> EpisodeConfig:
        if self.episode is not None:
            cfg = self.episode
        else:
            cfg = EpisodeConfig(task=self.task)
        if self.mode == "challenging":
            cfg = replace(cfg, max_ops=max(1, cfg.t_m // 2))
        return cfg


@dataclass
class MetricsRecord:
    config: ExperimentConfig
    test_rounds_at: list[int]
    metrics: RewardMetrics


def collect_or_load_demos(config: ExperimentConfig) -> DemoDataset:
    if config.demo_path is not None:
        return load_dataset(config.demo_path)
    rng = np.random.default_rng([config.demo_seed, hash_name(config.name) % (2**31)])
    env_cfg = config.episode_config()
    return nmpc.collect_demos(
        config.task, config.demo_rounds, rng,
        nmpc_config=config.nmpc,
        env_factory=lambda: ClothEnv(env_cfg),
    )


def hash_name(name: str) -> int:
    # stable across processes (builtin hash() is salted)
    h = 0
    for ch in name:
        h = (h * 131 + ord(ch)) % (2**31 - 1)
    return h


def seed_dir(out_dir: str, config: ExperimentConfig, seed: int) -> str:
    return os.path.join(out_dir, config.name, f"preset{config.preset}", f"seed{seed}")


def run_seed(
    config: ExperimentConfig, demos: DemoDataset, seed: int, out_dir: str
) -> TrainResult:
    """Train one seed and write its raw test rewards to metrics.txt."""
    env_cfg = config.episode_config()
    rng = np.random.default_rng([seed, config.preset, hash_name(config.name) % (2**31)])
    result = agent.train_hgcr(
        lambda: ClothEnv(env_cfg), demos, config.agent_config(), rng
    )
    d = seed_dir(out_dir, config, seed)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "metrics.txt"), "w") as fh:
        fh.write("# round_index reward_per_test_round...\n")
        for at, rewards in zip(result.test_rounds_at, result.test_rewards):
            fh.write(f"{at} " + " ".join(_f(r) for r in rewards) + "\n")
    save_agent(result.models, os.path.join(d, "checkpoint"))
    return result


def load_seed_rewards(path: str) -> tuple[list[int], np.ndarray]:
    rounds, rows = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            rounds.append(int(parts[0]))
            rows.append([float(x) for x in parts[1:]])
    return rounds, np.asarray(rows)


def run_experiment(config: ExperimentConfig, out_dir: str) -> MetricsRecord:
    """Collect (or load) demonstrations, train every seed, and merge the raw
    test rewards into summary metrics plus CSV/plot artifacts on disk."""
    os.makedirs(out_dir, exist_ok=True)
    demos = collect_or_load_demos(config)
    exp_dir = os.path.join(out_dir, config.name)
    os.makedirs(exp_dir, exist_ok=True)
    save_dataset(demos, os.path.join(exp_dir, "demos.txt"))

    rounds_at: list[int] | None = None
    raw = []
    for seed in config.seeds:
        result = run_seed(config, demos, seed, out_dir)
        raw.append(result.test_rewards)
        if rounds_at is None:
            rounds_at = result.test_rounds_at
    record = MetricsRecord(
        config=config, test_rounds_at=rounds_at, metrics=reward_metrics(np.asarray(raw))
    )
    preset_dir = os.path.join(exp_dir, f"preset{config.preset}")
    write_metrics_csv(record, os.path.join(preset_dir, "metrics.csv"))
    plot_reward_curve(record, os.path.join(preset_dir, "reward_curve.png"))
    return record


def write_metrics_csv(record: MetricsRecord, path: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    m = record.metrics
    with open(path, "w") as fh:
        fh.write("epoch,R_avg_t,sigma_t\n")
        for t, (mean, std) in enumerate(zip(m.epoch_mean, m.epoch_std)):
            fh.write(f"{t},{_f(mean)},{_f(std)}\n")


def plot_reward_curve(record: MetricsRecord, path: str) -> None:
    """Smoothed mean test reward with a +/- sigma band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(os.path.dirname(path), exist_ok=True)
    m = record.metrics
    x = np.asarray(record.test_rounds_at)
    mean = smooth3(m.epoch_mean)
    std = smooth3(m.epoch_std)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, mean, label=f"preset {record.config.preset}")
    ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("training round")
    ax.set_ylabel("mean test reward (window-3 smoothed)")
    ax.set_title(f"{record.config.task.value} / {record.config.mode}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparison(records: list[MetricsRecord], path: str) -> None:
    """Overlay smoothed reward curves of several presets."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(os.path.dirname(path), exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rec in records:
        ax.plot(rec.test_rounds_at, smooth3(rec.metrics.epoch_mean),
                label=f"preset {rec.config.preset}")
    ax.set_xlabel("training round")
    ax.set_ylabel("mean test reward (window-3 smoothed)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
