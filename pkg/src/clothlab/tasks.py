"""Task definitions (diagonal fold, axis fold, flatten), observation
extraction, error metrics, rewards, and the episode environment."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import cloth, geometry
from .cloth import ClothState, GraspMissError, MeshTopology, MotionParams, SimParams

DEFAULT_SIDE_LENGTH = 0.24
WORKSPACE_LO = np.array([-0.5, -0.5, 0.0])
WORKSPACE_HI = np.array([0.5, 0.5, 0.4])
DP_EPSILON = 0.01
DP_MAX_RETRIES = 6


class TaskKind(enum.Enum):
    DIAGONAL_FOLD = "diagonal"
    AXIS_FOLD = "axis"
    FLATTEN = "flatten"

    @property
    def n_endpoints(self) -> int:
        return 8 if self is TaskKind.FLATTEN else 4

    @property
    def state_dim(self) -> int:
        return 28 if self is TaskKind.FLATTEN else 13

    @property
    def default_max_ops(self) -> int:
        return {TaskKind.DIAGONAL_FOLD: 2, TaskKind.AXIS_FOLD: 4, TaskKind.FLATTEN: 10}[self]


@dataclass(frozen=True)
class StateVector:
    """Task-facing observation: endpoint positions (+ centroid for flatten)
    and the covered-area fraction."""

    task: TaskKind
    endpoints: np.ndarray          # (k, 3)
    area_fraction: float
    centroid: np.ndarray | None = None  # (3,) flatten only

    def vector(self) -> np.ndarray:
        parts = [self.endpoints.ravel()]
        if self.task is TaskKind.FLATTEN:
            parts.append(self.centroid)
        parts.append([self.area_fraction])
        return np.concatenate(parts)


@dataclass(frozen=True)
class Action:
    grasp_index: int      # endpoint index, 0-based in [0, k)
    delta: np.ndarray     # (3,) offset from the endpoint
    place: np.ndarray     # (3,) placement point


class RejectedActionError(Exception):
    """The action violates workspace or offset bounds."""


@dataclass(frozen=True)
class EpisodeConfig:
    task: TaskKind
    max_ops: int = 0              # 0 -> task default
    change_threshold: float = 0.02
    side_length: float = DEFAULT_SIDE_LENGTH
    mesh_n: int = 6
    fold_translation_noise: float = 0.02
    fold_rotation_noise_deg: float = 10.0
    flatten_init_steps: int = 10
    flatten_init_displacement: tuple[float, float] = (0.1, 0.2)
    cell_size: float = 0.0        # 0 -> side_length / 48

    def __post_init__(self):
        if self.change_threshold <= 0:
            raise ValueError("change_threshold must be positive")

    @property
    def t_m(self) -> int:
        return self.max_ops if self.max_ops > 0 else self.task.default_max_ops

    @property
    def raster_cell(self) -> float:
        return self.cell_size if self.cell_size > 0 else self.side_length / 48


def error_diagonal(sv: StateVector, side_length: float = DEFAULT_SIDE_LENGTH) -> float:
    """Distance to the diagonal-fold goal: diagonally opposite corners 1/4
    coincide, the other diagonal keeps its length, half the area covered.

    Endpoints are in row-major corner order (top-left, top-right,
    bottom-left, bottom-right)."""
    if sv.endpoints.shape != (4, 3):
        raise ValueError("diagonal-fold error needs a 4-endpoint state")
    p1, p2, p3, p4 = sv.endpoints
    return (
        float(np.linalg.norm(p1 - p4))
        + abs(np.sqrt(2.0) * side_length - float(np.linalg.norm(p2 - p3)))
        + abs(sv.area_fraction - 0.5)
    )


def error_axis(sv: StateVector, side_length: float = DEFAULT_SIDE_LENGTH) -> float:
    """Distance to the central-axis-fold goal."""
    if sv.endpoints.shape != (4, 3):
        raise ValueError("axis-fold error needs a 4-endpoint state")
    p1, p2, p3, p4 = sv.endpoints
    return (
        float(np.linalg.norm(p1 - p2))
        + float(np.linalg.norm(p3 - p4))
        + abs(side_length - float(np.linalg.norm(p1 - p3)))
        + abs(side_length - float(np.linalg.norm(p2 - p4)))
        + abs(sv.area_fraction - 0.5)
    )


def task_metric(task: TaskKind, sv: StateVector, side_length: float = DEFAULT_SIDE_LENGTH) -> float:
    """Progress metric: e_t for folds (lower better), f_t for flatten (higher better)."""
    if task is TaskKind.DIAGONAL_FOLD:
        return error_diagonal(sv, side_length)
    if task is TaskKind.AXIS_FOLD:
        return error_axis(sv, side_length)
    return sv.area_fraction


def decisive_reward(task: TaskKind, metric: float) -> float:
    if task is TaskKind.FLATTEN:
        return 200.0 * metric - 100.0
    return -200.0 * metric + 100.0


def reward(
    task: TaskKind, prev_metric: float, cur_metric: float, done: bool, t_z: float
) -> float:
    """Step reward: decisive value at episode end, +/-3 on significant
    progress/regress, else 0."""
    if done:
        return decisive_reward(task, cur_metric)
    if task is TaskKind.FLATTEN:
        improvement = cur_metric - prev_metric
    else:
        improvement = prev_metric - cur_metric
    if improvement > t_z:
        return 3.0
    if improvement < -t_z:
        return -3.0
    return 0.0


def corner_indices(n: int) -> tuple[int, int, int, int]:
    """Mesh corner particles in row-major order 1..4 (0-based indices)."""
    return (0, n - 1, n * n - n, n * n - 1)


def extract_state(
    state: ClothState, topo: MeshTopology, task: TaskKind, config: EpisodeConfig
) -> StateVector:
    cell = config.raster_cell
    area = geometry.covered_area(state, topo, cell)
    frac = min(area / (config.side_length**2), 1.05)
    if task is not TaskKind.FLATTEN:
        idx = corner_indices(topo.n)
        return StateVector(task=task, endpoints=state.positions[list(idx)].copy(), area_fraction=frac)
    contour = geometry.project_and_outline(state, topo, cell)
    eps = DP_EPSILON
    simplified = geometry.douglas_peucker(contour, eps)
    for _ in range(DP_MAX_RETRIES):
        if len(simplified) >= 8:
            break
        eps /= 2.0
        simplified = geometry.douglas_peucker(contour, eps)
    if len(simplified) < 8:
        # A near-perfect rectangle simplifies to its 4 corners at any
        # epsilon; select endpoints from the raw boundary instead.
        simplified = contour
    points2d = geometry.mmdvs(simplified, 8)
    table_z = np.full((8, 1), state.positions[:, 2].min())
    endpoints = np.hstack([points2d, table_z])
    c2d = geometry.polygon_centroid(contour)
    centroid = np.array([c2d[0], c2d[1], float(table_z[0, 0])])
    return StateVector(task=task, endpoints=endpoints, area_fraction=frac, centroid=centroid)


def in_workspace(point: np.ndarray) -> bool:
    return bool(np.all(point >= WORKSPACE_LO) and np.all(point <= WORKSPACE_HI))


class ClothEnv:
    """Stateful episode environment over the spring-mass plant.

    Single-owner: one training/evaluation run per instance.
    """

    def __init__(
        self,
        config: EpisodeConfig,
        topo: MeshTopology | None = None,
        params: SimParams | None = None,
        motion: MotionParams | None = None,
    ):
        self.config = config
        self.topo = topo or MeshTopology.grid(
            n=config.mesh_n, edge_length=config.side_length, shear=True
        )
        self.params = params or SimParams()
        self.motion = motion or MotionParams()
        self.state: ClothState | None = None
        self.sv: StateVector | None = None
        self.metric: float = 0.0
        self.op_count = 0

    def reset(self, rng: np.random.Generator) -> StateVector:
        cfg = self.config
        st = cloth.flat_state(self.topo, self.params)
        if cfg.task is TaskKind.FLATTEN:
            self.state = st
            for _ in range(cfg.flatten_init_steps):
                self._random_perturbation(rng)
            st = self.state
        else:
            angle = np.deg2rad(rng.uniform(-cfg.fold_rotation_noise_deg, cfg.fold_rotation_noise_deg))
            shift = rng.uniform(-cfg.fold_translation_noise, cfg.fold_translation_noise, size=2)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            pos = st.positions.copy()
            pos[:, :2] = pos[:, :2] @ rot.T + shift
            st = ClothState(positions=pos, velocities=np.zeros_like(pos), t=0)
        self.state = st
        self.op_count = 0
        self.sv = extract_state(st, self.topo, cfg.task, cfg)
        self.metric = task_metric(cfg.task, self.sv, cfg.side_length)
        return self.sv

    def _random_perturbation(self, rng: np.random.Generator) -> None:
        cfg = self.config
        idx = int(rng.integers(self.topo.n_particles))
        grasp = self.state.positions[idx]
        dist = rng.uniform(*cfg.flatten_init_displacement)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        place = grasp + np.array([dist * np.cos(theta), dist * np.sin(theta), 0.0])
        place = np.clip(place, WORKSPACE_LO, WORKSPACE_HI)
        place[2] = self.params.table_height
        self.state, _ = cloth.execute_pick_place(
            self.state, grasp, place, self.topo, self.params, self.motion
        )

    def apply_action(self, action: Action) -> tuple[StateVector, float, bool]:
        """Resolve the endpoint, pick-and-place, re-observe, reward.

        A grasp miss leaves the cloth unchanged but still consumes an operation.
        """
        if self.state is None:
            raise RuntimeError("call reset() before apply_action()")
        cfg = self.config
        k = cfg.task.n_endpoints
        if not 0 <= action.grasp_index < k:
            raise RejectedActionError(f"grasp index {action.grasp_index} outside [0, {k})")
        if np.any(np.abs(action.delta) > cfg.side_length / 2 + 1e-12):
            raise RejectedActionError("offset component exceeds half the cloth side length")
        place = np.asarray(action.place, dtype=float)
        if not in_workspace(place):
            raise RejectedActionError(f"placement point {place.tolist()} outside workspace")

        grasp = self.sv.endpoints[action.grasp_index] + np.asarray(action.delta, dtype=float)
        prev_metric = self.metric
        try:
            self.state, _ = cloth.execute_pick_place(
                self.state, grasp, place, self.topo, self.params, self.motion
            )
        except GraspMissError:
            pass  # physical gripping failure: cloth unchanged, operation spent
        self.op_count += 1
        done = self.op_count >= cfg.t_m
        self.sv = extract_state(self.state, self.topo, cfg.task, cfg)
        self.metric = task_metric(cfg.task, self.sv, cfg.side_length)
        return self.sv, reward(cfg.task, prev_metric, self.metric, done, cfg.change_threshold), done

    def decisive_reward(self) -> float:
        return decisive_reward(self.config.task, self.metric)


def init_episode(
    task: TaskKind, config: EpisodeConfig | None, rng: np.random.Generator, **env_kwargs
) -> ClothEnv:
    env = ClothEnv(config or EpisodeConfig(task=task), **env_kwargs)
    env.reset(rng)
    return env
