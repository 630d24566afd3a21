"""HGCR-DDPG: twin-target-critic DDPG with demonstration-gated behavior
cloning, an optional demo-vs-actor critic margin term, conditional policy
learning through a grasp-point selector, and the eight ablation presets."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import fuzzy, nn
from .nmpc import DemoDataset, DemoRecord
from .tasks import Action, ClothEnv, TaskKind, WORKSPACE_HI, WORKSPACE_LO


class SelectorKind(enum.Enum):
    HTSK = "htsk"
    RANDOM = "random"
    UNIFORM = "uniform"
    NEURAL_BC = "neural_bc"


#: preset -> (grasp selector, GABC on, CPL on); preset 1 is HGCR-DDPG,
#: preset 8 the Rainbow-DDPG baseline.
PRESETS: dict[int, tuple[SelectorKind, bool, bool]] = {
    1: (SelectorKind.HTSK, True, True),
    2: (SelectorKind.NEURAL_BC, True, False),
    3: (SelectorKind.HTSK, False, True),
    4: (SelectorKind.RANDOM, False, True),
    5: (SelectorKind.UNIFORM, False, True),
    6: (SelectorKind.RANDOM, True, True),
    7: (SelectorKind.UNIFORM, True, True),
    8: (SelectorKind.NEURAL_BC, False, False),
}


@dataclass(frozen=True)
class AgentConfig:
    selector: SelectorKind = SelectorKind.HTSK
    gabc: bool = True
    cpl: bool = True
    gamma: float = 0.99
    n_step: int = 5
    lambda_1step: float = 1.0
    lambda_nstep: float = 0.5
    # Demonstration rows are a small fraction of each mixed batch, so the
    # cloning term needs a large weight to hold its own against the policy
    # gradient once regular training starts.
    lambda_bc: float = 30.0
    q_diff_margin: float = 100.0
    # Margin weight after the pre-training phase (pre-training itself always
    # uses 1). Kept active by default: with sparse decisive rewards the critic
    # never becomes accurate enough to rank actions on its own, and once it
    # stops preferring demonstration actions the cloning gate closes and the
    # policy gradient unlearns the demonstrated folds.
    lambda_diff_regular: float = 1.0
    # The policy-gradient term is rescaled by dpg_alpha / mean|Q| over the
    # batch, keeping it commensurate with the cloning term regardless of the
    # reward magnitude; decisive rewards put Q around +-100, and the raw
    # gradient overwhelms the demonstration anchor. Set <= 0 for the raw
    # (unscaled) gradient.
    dpg_alpha: float = 0.5
    noise_sigma: float = 0.01
    tau: float = 0.001
    batch_size: int = 64
    pretrain_rounds: int = 20
    regular_rounds: int = 100
    updates_per_step: int = 0        # 0 -> task default (80 / 40 / 20)
    epoch_rounds: int = 20
    pretest_interval: int = 5
    test_rounds: int = 10
    grasp_retrain_threshold: int = 50
    htsk_rules: int = 10
    htsk_epochs: int = 100
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    # Penalty on the actor's pre-squash outputs. Without it the policy
    # gradient drives them far past tanh saturation, where all gradients
    # (including behavior cloning) vanish and the policy freezes at the
    # action-space corners.
    actor_reg: float = 1e-3
    hidden_layers: int = 50
    hidden_width: int = 16
    residual_every: int = 5
    replay_capacity: int = 100_000
    prioritized: bool = False
    priority_alpha: float = 0.6

    @classmethod
    def for_preset(cls, preset: int, **overrides) -> "AgentConfig":
        if preset not in PRESETS:
            raise ValueError(f"preset must be in 1..8, got {preset}")
        selector, gabc, cpl = PRESETS[preset]
        return cls(selector=selector, gabc=gabc, cpl=cpl, **overrides)

    def task_updates_per_step(self, task: TaskKind) -> int:
        if self.updates_per_step > 0:
            return self.updates_per_step
        return {TaskKind.DIAGONAL_FOLD: 80, TaskKind.AXIS_FOLD: 40, TaskKind.FLATTEN: 20}[task]


@dataclass
class Transition:
    state: np.ndarray
    grasp_index: int
    body: np.ndarray          # (6,) offset + placement
    reward: float
    next_state: np.ndarray
    done: bool
    demo: bool
    n_return: float = 0.0
    n_state: np.ndarray | None = None
    n_done: bool = False
    n_gap: int = 1


def assign_nstep_fields(episode: list[Transition], gamma: float, n: int) -> None:
    """Fill n-step return / successor fields in place, truncating at the
    episode end."""
    L = len(episode)
    for i in range(L):
        gap = min(n, L - i)
        ret = 0.0
        for t in range(gap):
            ret += (gamma**t) * episode[i + t].reward
        last = episode[i + gap - 1]
        episode[i].n_return = ret
        episode[i].n_state = last.next_state
        episode[i].n_done = last.done
        episode[i].n_gap = gap


class ReplayBuffer:
    """Ring buffer with permanently retained demonstration entries and
    optional proportional prioritization."""

    def __init__(self, capacity: int, prioritized: bool = False, alpha: float = 0.6):
        self.capacity = capacity
        self.prioritized = prioritized
        self.alpha = alpha
        self.demo: list[Transition] = []
        self.ring: list[Transition] = []
        self._ring_pos = 0
        self._demo_priority: list[float] = []
        self._ring_priority: list[float] = []
        self._max_priority = 1.0

    def __len__(self) -> int:
        return len(self.demo) + len(self.ring)

    def add(self, tr: Transition) -> None:
        if tr.demo:
            self.demo.append(tr)
            self._demo_priority.append(self._max_priority)
        elif len(self.ring) < self.capacity:
            self.ring.append(tr)
            self._ring_priority.append(self._max_priority)
        else:
            self.ring[self._ring_pos] = tr
            self._ring_priority[self._ring_pos] = self._max_priority
            self._ring_pos = (self._ring_pos + 1) % self.capacity

    def sample(
        self, batch_size: int, rng: np.random.Generator, demo_only: bool = False
    ) -> list[Transition]:
        source = self.demo if demo_only else self.demo + self.ring
        if not source:
            raise ValueError("cannot sample from an empty buffer")
        if self.prioritized and not demo_only:
            pri = np.asarray(self._demo_priority + self._ring_priority) ** self.alpha
            probs = pri / pri.sum()
            idx = rng.choice(len(source), size=batch_size, p=probs)
        else:
            idx = rng.integers(len(source), size=batch_size)
        return [source[i] for i in idx]

    def update_priority(self, tr: Transition, td_error: float) -> None:
        if not self.prioritized:
            return
        p = abs(td_error) + 1e-6
        self._max_priority = max(self._max_priority, p)
        for store, pri in ((self.demo, self._demo_priority), (self.ring, self._ring_priority)):
            for i, item in enumerate(store):
                if item is tr:
                    pri[i] = p
                    return


@dataclass(frozen=True)
class ActionBounds:
    delta_max: float
    place_lo: np.ndarray
    place_hi: np.ndarray

    @classmethod
    def for_side_length(cls, side_length: float) -> "ActionBounds":
        return cls(delta_max=side_length / 2, place_lo=WORKSPACE_LO.copy(),
                   place_hi=WORKSPACE_HI.copy())


def squash_body(raw: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    """Map raw actor output to valid (offset, placement) values via tanh."""
    raw = np.atleast_2d(raw)
    t = np.tanh(raw)
    delta = bounds.delta_max * t[:, :3]
    center = (bounds.place_hi + bounds.place_lo) / 2
    half = (bounds.place_hi - bounds.place_lo) / 2
    place = center + half * t[:, 3:]
    out = np.hstack([delta, place])
    return out


def squash_body_grad(raw: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    """Elementwise d squash / d raw."""
    raw = np.atleast_2d(raw)
    sech2 = 1.0 - np.tanh(raw) ** 2
    half = (bounds.place_hi - bounds.place_lo) / 2
    scale = np.concatenate([np.full(3, bounds.delta_max), half])
    return sech2 * scale


class GraspSelector:
    """Benchmark grasp-point policy: fuzzy, neural BC, i.i.d. random, or
    per-episode round-robin."""

    def __init__(self, kind: SelectorKind, k: int, state_dim: int, config: AgentConfig,
                 rng: np.random.Generator):
        self.kind = kind
        self.k = k
        self.state_dim = state_dim
        self.config = config
        self._rr_counter = 0
        self.htsk: fuzzy.HtskModel | None = None
        self.net: nn.DenseNet | None = None
        self._net_adam: nn.AdamState | None = None
        if kind is SelectorKind.NEURAL_BC:
            self.net = nn.DenseNet.create([state_dim, 32, 32, k], rng)
            self._net_adam = nn.AdamState.for_params(self.net.parameters())

    def reset_episode(self) -> None:
        self._rr_counter = 0

    def fit(self, dataset: fuzzy.GraspDataset, rng: np.random.Generator) -> None:
        if self.kind is SelectorKind.HTSK:
            rules = min(self.config.htsk_rules, len(dataset))
            model = fuzzy.build_model(dataset, rules, self.k, rng)
            self.htsk = fuzzy.train(
                dataset, model, rng,
                fuzzy.TrainConfig(epochs=self.config.htsk_epochs),
            )
        elif self.kind is SelectorKind.NEURAL_BC:
            self._fit_net(dataset, rng)

    def _fit_net(self, dataset: fuzzy.GraspDataset, rng: np.random.Generator,
                 epochs: int = 100) -> None:
        N = len(dataset)
        for _ in range(epochs):
            order = rng.permutation(N)
            for start in range(0, N, 64):
                batch = order[start:start + 64]
                x = dataset.inputs[batch]
                y = dataset.labels[batch]
                logits, cache = self.net.forward(x)
                logits = np.atleast_2d(logits)
                probs = _softmax_rows(logits)
                g = probs
                g[np.arange(len(batch)), y] -= 1.0
                g /= len(batch)
                gw, gb, _ = self.net.backward(cache, g)
                nn.adam_step(self.net.parameters(), gw + gb, self._net_adam, lr=1e-3)

    def probabilities(self, state_vec: np.ndarray) -> np.ndarray:
        if self.kind is SelectorKind.HTSK and self.htsk is not None:
            return fuzzy.forward(state_vec, self.htsk)
        if self.kind is SelectorKind.NEURAL_BC and self.net is not None:
            logits, _ = self.net.forward(state_vec)
            return _softmax_rows(np.atleast_2d(logits))[0]
        return np.full(self.k, 1.0 / self.k)

    def choose(self, state_vec: np.ndarray, rng: np.random.Generator,
               explore: bool) -> int:
        if self.kind is SelectorKind.RANDOM:
            return int(rng.integers(self.k))
        if self.kind is SelectorKind.UNIFORM:
            idx = self._rr_counter % self.k
            self._rr_counter += 1
            return idx
        probs = self.probabilities(state_vec)
        if explore:
            return int(rng.choice(self.k, p=probs / probs.sum()))
        return int(np.argmax(probs))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class AgentModels:
    actor: nn.DenseNet
    critic: nn.DenseNet
    target_actor: nn.DenseNet
    target_critic_1: nn.DenseNet
    target_critic_2: nn.DenseNet
    selector: GraspSelector
    bounds: ActionBounds
    config: AgentConfig
    state_dim: int
    k: int

    def actor_input(self, states: np.ndarray, grasp_indices: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        if not self.config.cpl:
            return states
        onehot = np.zeros((len(states), self.k))
        onehot[np.arange(len(states)), grasp_indices] = 1.0
        return np.hstack([states, onehot])

    def critic_input(self, states: np.ndarray, grasp_indices: np.ndarray,
                     bodies: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        bodies = np.atleast_2d(bodies)
        onehot = np.zeros((len(states), self.k))
        onehot[np.arange(len(states)), grasp_indices] = 1.0
        return np.hstack([states, onehot, bodies])


def build_models(task: TaskKind, config: AgentConfig, side_length: float,
                 rng: np.random.Generator) -> AgentModels:
    state_dim = task.state_dim
    k = task.n_endpoints
    actor_in = state_dim + (k if config.cpl else 0)
    critic_in = state_dim + k + 6
    hidden = [config.hidden_width] * config.hidden_layers
    actor = nn.DenseNet.create([actor_in] + hidden + [6], rng,
                               residual_every=config.residual_every)
    critic = nn.DenseNet.create([critic_in] + hidden + [1], rng,
                                residual_every=config.residual_every)
    # Algorithm-style initialization: one target starts as a copy of the
    # current critic, the twin from an independent draw; both track Q.
    target_c1 = critic.copy()
    target_c2 = nn.DenseNet.create([critic_in] + hidden + [1], rng,
                                   residual_every=config.residual_every)
    selector = GraspSelector(config.selector, k, state_dim, config, rng)
    return AgentModels(
        actor=actor, critic=critic, target_actor=actor.copy(),
        target_critic_1=target_c1, target_critic_2=target_c2,
        selector=selector, bounds=ActionBounds.for_side_length(side_length),
        config=config, state_dim=state_dim, k=k,
    )


def actor_act(
    state_vec: np.ndarray, grasp_index: int, models: AgentModels,
    sigma: float, rng: np.random.Generator | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic actor output plus exploration noise, clipped to bounds."""
    x = models.actor_input(state_vec, np.array([grasp_index]))
    raw, _ = models.actor.forward(x)
    body = squash_body(np.atleast_2d(raw), models.bounds)[0]
    if sigma > 0:
        if rng is None:
            raise ValueError("exploration noise needs an rng")
        body = body + rng.normal(0.0, sigma, size=6)
    b = models.bounds
    delta = np.clip(body[:3], -b.delta_max, b.delta_max)
    place = np.clip(body[3:], b.place_lo, b.place_hi)
    return delta, place


def _target_body(models: AgentModels, states: np.ndarray,
                 grasp_indices: np.ndarray) -> np.ndarray:
    x = models.actor_input(states, grasp_indices)
    raw, _ = models.target_actor.forward(x)
    return squash_body(np.atleast_2d(raw), models.bounds)


def _selector_indices(models: AgentModels, states: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    sel = models.selector
    if sel.kind is SelectorKind.RANDOM:
        return rng.integers(sel.k, size=len(states))
    if sel.kind is SelectorKind.UNIFORM:
        # cycle without disturbing the per-episode acting counter
        return np.arange(len(states)) % sel.k
    return np.array([int(np.argmax(sel.probabilities(s))) for s in states])


def critic_targets(
    batch: list[Transition], models: AgentModels, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """TD3-style 1-step and n-step targets with the grasp index supplied by
    the selector and the body by the target actor."""
    cfg = models.config
    next_states = np.stack([t.next_state for t in batch])
    n_states = np.stack([t.n_state for t in batch])
    g1 = _selector_indices(models, next_states, rng)
    gn = _selector_indices(models, n_states, rng)

    def twin_min(states, grasp):
        bodies = _target_body(models, states, grasp)
        xin = models.critic_input(states, grasp, bodies)
        q1, _ = models.target_critic_1.forward(xin)
        q2, _ = models.target_critic_2.forward(xin)
        return np.minimum(np.atleast_2d(q1)[:, 0], np.atleast_2d(q2)[:, 0])

    q_next = twin_min(next_states, g1)
    q_n = twin_min(n_states, gn)
    r = np.array([t.reward for t in batch])
    done = np.array([t.done for t in batch], dtype=float)
    n_ret = np.array([t.n_return for t in batch])
    n_done = np.array([t.n_done for t in batch], dtype=float)
    n_gap = np.array([t.n_gap for t in batch], dtype=float)
    y1 = r + cfg.gamma * (1.0 - done) * q_next
    yn = n_ret + (cfg.gamma**n_gap) * (1.0 - n_done) * q_n
    return y1, yn


def critic_update(
    batch: list[Transition], models: AgentModels, adam: nn.AdamState,
    lambda_diff: float, rng: np.random.Generator,
) -> float:
    """One critic gradient step on the weighted 1-step / n-step / margin loss.
    Returns the scalar loss."""
    cfg = models.config
    N = len(batch)
    states = np.stack([t.state for t in batch])
    grasp = np.array([t.grasp_index for t in batch])
    bodies = np.stack([t.body for t in batch])
    y1, yn = critic_targets(batch, models, rng)

    xin = models.critic_input(states, grasp, bodies)
    q, cache = models.critic.forward(xin)
    q = np.atleast_2d(q)[:, 0]
    loss = cfg.lambda_1step * float(np.mean((q - y1) ** 2))
    loss += cfg.lambda_nstep * float(np.mean((q - yn) ** 2))
    dq = (2.0 * cfg.lambda_1step * (q - y1) + 2.0 * cfg.lambda_nstep * (q - yn)) / N

    demo_mask = np.array([t.demo for t in batch])
    use_margin = cfg.gabc and lambda_diff > 0 and bool(demo_mask.any())
    if use_margin:
        idx = np.nonzero(demo_mask)[0]
        actor_in = models.actor_input(states[idx], grasp[idx])
        raw, _ = models.actor.forward(actor_in)
        w_bodies = squash_body(np.atleast_2d(raw), models.bounds)
        xw = models.critic_input(states[idx], grasp[idx], w_bodies)
        qw, cache_w = models.critic.forward(xw)
        qw = np.atleast_2d(qw)[:, 0]
        gap = q[idx] - qw
        hinge = np.maximum(0.0, cfg.q_diff_margin - gap)
        loss += lambda_diff * float(np.mean(hinge))
        active = (hinge > 0).astype(float) / len(idx)
        dq[idx] += lambda_diff * (-active)
        dqw = lambda_diff * active
        gw_w, gb_w, _ = models.critic.backward(cache_w, dqw[:, None])
    gw, gb, _ = models.critic.backward(cache, dq[:, None])
    if use_margin:
        gw = [a + b for a, b in zip(gw, gw_w)]
        gb = [a + b for a, b in zip(gb, gb_w)]
    nn.adam_step(models.critic.parameters(), gw + gb, adam, lr=cfg.critic_lr)
    return loss


def actor_update(
    batch: list[Transition], models: AgentModels, adam: nn.AdamState,
    bc_only: bool = False,
) -> float:
    """Deterministic policy gradient plus critic-gated behavior cloning on
    demonstration transitions. Returns the actor objective value.

    With ``bc_only`` the policy-gradient term and the critic gate are skipped
    and the actor regresses directly onto the demonstration actions. Used
    during pre-training, where the critic is still too noisy to steer the
    actor: its gradient otherwise holds the clone just outside the grasp
    radius and the deterministic policy never touches the cloth.
    """
    cfg = models.config
    N = len(batch)
    states = np.stack([t.state for t in batch])
    grasp = np.array([t.grasp_index for t in batch])
    bodies = np.stack([t.body for t in batch])

    actor_in = models.actor_input(states, grasp)
    raw, actor_cache = models.actor.forward(actor_in)
    raw = np.atleast_2d(raw)
    actor_bodies = squash_body(raw, models.bounds)

    if bc_only:
        loss = 0.0
        d_bodies = np.zeros((N, 6))
        q = None
    else:
        xin = models.critic_input(states, grasp, actor_bodies)
        q, critic_cache = models.critic.forward(xin)
        q = np.atleast_2d(q)[:, 0]
        if cfg.dpg_alpha > 0:
            scale = cfg.dpg_alpha / (float(np.mean(np.abs(q))) + 1e-8)
        else:
            scale = 1.0
        loss = -scale * float(np.mean(q))
        dq = np.full((N, 1), -scale / N)
        _, _, dxin = models.critic.backward(critic_cache, dq)
        d_bodies = dxin[:, -6:]

    demo_mask = np.array([t.demo for t in batch])
    if cfg.gabc and cfg.lambda_bc > 0 and bool(demo_mask.any()):
        idx = np.nonzero(demo_mask)[0]
        if bc_only:
            prefer_demo = np.ones(len(idx), dtype=bool)
        else:
            x_demo = models.critic_input(states[idx], grasp[idx], bodies[idx])
            q_demo, _ = models.critic.forward(x_demo)
            q_demo = np.atleast_2d(q_demo)[:, 0]
            prefer_demo = q_demo > q[idx]
        if bool(prefer_demo.any()):
            sel = idx[prefer_demo]
            diff = actor_bodies[sel] - bodies[sel]
            loss += cfg.lambda_bc * float(np.mean(np.sum(diff**2, axis=1)))
            d_bodies[sel] += 2.0 * cfg.lambda_bc * diff / len(sel)

    d_raw = d_bodies * squash_body_grad(raw, models.bounds)
    if cfg.actor_reg > 0:
        loss += cfg.actor_reg * float(np.mean(np.sum(raw**2, axis=1)))
        d_raw += 2.0 * cfg.actor_reg * raw / N
    gw, gb, _ = models.actor.backward(actor_cache, d_raw)
    nn.adam_step(models.actor.parameters(), gw + gb, adam, lr=cfg.actor_lr)
    return loss


def demo_transitions(demos: DemoDataset, config: AgentConfig) -> list[Transition]:
    out = []
    for ep in demos.episodes:
        episode = [
            Transition(
                state=r.state.copy(), grasp_index=r.grasp_index,
                body=np.concatenate([r.delta, r.place]), reward=r.reward,
                next_state=r.next_state.copy(), done=r.done, demo=True,
            )
            for r in ep.transitions
        ]
        assign_nstep_fields(episode, config.gamma, config.n_step)
        out.extend(episode)
    return out


def grasp_dataset_from(records: list[tuple[np.ndarray, int]]) -> fuzzy.GraspDataset:
    inputs = np.stack([s for s, _ in records])
    labels = np.array([g for _, g in records], dtype=np.int64)
    return fuzzy.GraspDataset(inputs=inputs, labels=labels)


@dataclass
class TrainResult:
    models: AgentModels
    test_rewards: list[list[float]]  # one list of per-round totals per test epoch
    test_rounds_at: list[int]        # training round index of each test epoch


def evaluate(
    models: AgentModels, env: ClothEnv, episodes: int, rng: np.random.Generator
) -> list[float]:
    """Noise-free episodes with deterministic grasp selection; returns the
    total reward of each episode."""
    rewards = []
    for _ in range(episodes):
        sv = env.reset(rng)
        models.selector.reset_episode()
        total = 0.0
        done = False
        while not done:
            s = sv.vector()
            p_g = models.selector.choose(s, rng, explore=False)
            delta, place = actor_act(s, p_g, models, sigma=0.0, rng=None)
            sv, r, done = env.apply_action(Action(p_g, delta, place))
            total += r
        rewards.append(total)
    return rewards


def train_hgcr(
    env_factory, demos: DemoDataset, config: AgentConfig, rng: np.random.Generator
) -> TrainResult:
    """The full conditional-policy-learning loop: grasp selector trained on
    demonstration pairs first, then GABC-augmented critic/actor training with
    demo-seeded replay, pre-training on demos only, and periodic testing."""
    env: ClothEnv = env_factory()
    task = env.config.task
    needs_demos = config.selector in (SelectorKind.HTSK, SelectorKind.NEURAL_BC) or config.gabc
    if needs_demos and len(demos.episodes) == 0:
        raise ValueError("this preset requires a non-empty demonstration dataset")

    models = build_models(task, config, env.config.side_length, rng)
    grasp_records: list[tuple[np.ndarray, int]] = [
        (r.state, r.grasp_index) for r in demos.records()
    ]
    if grasp_records:
        models.selector.fit(grasp_dataset_from(grasp_records), rng)

    buffer = ReplayBuffer(config.replay_capacity, config.prioritized, config.priority_alpha)
    for tr in demo_transitions(demos, config):
        buffer.add(tr)

    critic_adam = nn.AdamState.for_params(models.critic.parameters())
    actor_adam = nn.AdamState.for_params(models.actor.parameters())
    t_n = config.task_updates_per_step(task)

    test_rewards: list[list[float]] = []
    test_rounds_at: list[int] = []

    def run_test(round_idx: int):
        test_env = env_factory()
        test_rng = np.random.default_rng(
            [int(rng.integers(2**31)), round_idx]
        )
        test_rewards.append(evaluate(models, test_env, config.test_rounds, test_rng))
        test_rounds_at.append(round_idx)

    run_test(0)
    pending_grasp = 0
    total_rounds = config.pretrain_rounds + config.regular_rounds
    for round_idx in range(1, total_rounds + 1):
        pretraining = round_idx <= config.pretrain_rounds
        lambda_diff = 1.0 if pretraining else config.lambda_diff_regular
        sv = env.reset(rng)
        models.selector.reset_episode()
        episode: list[Transition] = []
        done = False
        while not done:
            s = sv.vector()
            p_g = models.selector.choose(s, rng, explore=True)
            delta, place = actor_act(s, p_g, models, config.noise_sigma, rng)
            prev_metric = env.metric
            sv, r, done = env.apply_action(Action(p_g, delta, place))
            tr = Transition(
                state=s, grasp_index=p_g, body=np.concatenate([delta, place]),
                reward=r, next_state=sv.vector(), done=done, demo=False,
                n_state=sv.vector(),
            )
            episode.append(tr)
            buffer.add(tr)
            if _significant_advance(task, prev_metric, env.metric, env.config.change_threshold):
                grasp_records.append((s, p_g))
                pending_grasp += 1
                if pending_grasp > config.grasp_retrain_threshold:
                    models.selector.fit(grasp_dataset_from(grasp_records), rng)
                    pending_grasp = 0
            for _ in range(t_n):
                batch = buffer.sample(
                    config.batch_size, rng,
                    demo_only=pretraining and len(buffer.demo) > 0,
                )
                critic_update(batch, models, critic_adam, lambda_diff, rng)
                actor_update(
                    batch, models, actor_adam,
                    bc_only=pretraining and config.gabc and len(buffer.demo) > 0,
                )
            nn.soft_update(models.target_critic_1, models.critic, config.tau)
            nn.soft_update(models.target_critic_2, models.critic, config.tau)
            nn.soft_update(models.target_actor, models.actor, config.tau)
        assign_nstep_fields(episode, config.gamma, config.n_step)

        if pretraining and round_idx % config.pretest_interval == 0:
            run_test(round_idx)
        elif not pretraining and (round_idx - config.pretrain_rounds) % config.epoch_rounds == 0:
            run_test(round_idx)

    return TrainResult(models=models, test_rewards=test_rewards, test_rounds_at=test_rounds_at)


def _significant_advance(task: TaskKind, prev: float, cur: float, t_z: float) -> bool:
    if task is TaskKind.FLATTEN:
        return cur - prev > t_z
    return prev - cur > t_z
