"""Task error metrics, rewards, observation extraction, and the episode env."""
import numpy as np
import pytest

from clothlab import cloth, tasks
from clothlab.cloth import MeshTopology, SimParams
from clothlab.tasks import (
    Action,
    ClothEnv,
    EpisodeConfig,
    RejectedActionError,
    StateVector,
    TaskKind,
)

SIDE = tasks.DEFAULT_SIDE_LENGTH


def flat_corners(side=SIDE):
    """Corner endpoint rows in row-major order (TL, TR, BL, BR) at z=0."""
    h = side / 2
    return np.array(
        [[-h, h, 0.0], [h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]]
    )


def test_error_diagonal_flat_hand_value():
    sv = StateVector(task=TaskKind.DIAGONAL_FOLD, endpoints=flat_corners(), area_fraction=1.0)
    # |p1-p4| = sqrt(2)*s, second diagonal term 0, area term 0.5
    expected = np.sqrt(2.0) * SIDE + 0.5
    assert abs(tasks.error_diagonal(sv) - expected) < 1e-12


def test_error_diagonal_perfect_fold_is_zero():
    pts = flat_corners()
    pts[0] = pts[3]  # corner 1 folded onto corner 4
    sv = StateVector(task=TaskKind.DIAGONAL_FOLD, endpoints=pts, area_fraction=0.5)
    assert tasks.error_diagonal(sv) < 1e-12


def test_error_axis_flat_hand_value():
    sv = StateVector(task=TaskKind.AXIS_FOLD, endpoints=flat_corners(), area_fraction=1.0)
    # two pair distances of s, two side lengths already correct, area 0.5 off
    expected = 2.0 * SIDE + 0.5
    assert abs(tasks.error_axis(sv) - expected) < 1e-12


def test_error_axis_perfect_fold_is_zero():
    pts = flat_corners()
    pts[1] = pts[0]  # right corners folded onto left
    pts[3] = pts[2]
    sv = StateVector(task=TaskKind.AXIS_FOLD, endpoints=pts, area_fraction=0.5)
    assert tasks.error_axis(sv) < 1e-12


def test_error_metrics_reject_wrong_shape():
    sv = StateVector(task=TaskKind.FLATTEN, endpoints=np.zeros((8, 3)), area_fraction=1.0)
    with pytest.raises(ValueError):
        tasks.error_diagonal(sv)
    with pytest.raises(ValueError):
        tasks.error_axis(sv)


def test_decisive_reward_anchors():
    assert tasks.decisive_reward(TaskKind.DIAGONAL_FOLD, 0.0) == 100.0
    assert tasks.decisive_reward(TaskKind.DIAGONAL_FOLD, 0.5) == 0.0
    assert tasks.decisive_reward(TaskKind.FLATTEN, 1.0) == 100.0
    assert tasks.decisive_reward(TaskKind.FLATTEN, 0.5) == 0.0


def test_step_reward_thresholds():
    t_z = 0.02
    # fold: error decrease is progress
    assert tasks.reward(TaskKind.DIAGONAL_FOLD, 0.5, 0.4, False, t_z) == 3.0
    assert tasks.reward(TaskKind.DIAGONAL_FOLD, 0.4, 0.5, False, t_z) == -3.0
    assert tasks.reward(TaskKind.DIAGONAL_FOLD, 0.5, 0.49, False, t_z) == 0.0
    # flatten: coverage increase is progress
    assert tasks.reward(TaskKind.FLATTEN, 0.5, 0.6, False, t_z) == 3.0
    # done -> decisive regardless of step change
    assert tasks.reward(TaskKind.DIAGONAL_FOLD, 0.5, 0.25, True, t_z) == 50.0


def test_corner_indices_row_major():
    assert tasks.corner_indices(6) == (0, 5, 30, 35)


def test_extract_state_fold_shape_and_area():
    cfg = EpisodeConfig(task=TaskKind.DIAGONAL_FOLD)
    topo = MeshTopology.grid(n=6, shear=True)
    state = cloth.flat_state(topo, SimParams())
    sv = tasks.extract_state(state, topo, TaskKind.DIAGONAL_FOLD, cfg)
    assert sv.endpoints.shape == (4, 3)
    assert 0.9 < sv.area_fraction <= 1.05
    assert len(sv.vector()) == 13


def test_extract_state_flatten_shape():
    cfg = EpisodeConfig(task=TaskKind.FLATTEN)
    topo = MeshTopology.grid(n=6, shear=True)
    state = cloth.flat_state(topo, SimParams())
    sv = tasks.extract_state(state, topo, TaskKind.FLATTEN, cfg)
    assert sv.endpoints.shape == (8, 3)
    assert sv.centroid is not None
    assert len(sv.vector()) == 28
    assert np.linalg.norm(sv.centroid[:2]) < 0.02  # flat cloth centered at origin


def test_env_reset_fold_applies_pose_noise():
    env = ClothEnv(EpisodeConfig(task=TaskKind.DIAGONAL_FOLD))
    sv1 = env.reset(np.random.default_rng(0))
    sv2 = env.reset(np.random.default_rng(1))
    assert not np.allclose(sv1.endpoints, sv2.endpoints)
    assert env.op_count == 0


def test_env_rejects_bad_actions():
    env = ClothEnv(EpisodeConfig(task=TaskKind.DIAGONAL_FOLD))
    env.reset(np.random.default_rng(0))
    with pytest.raises(RejectedActionError):
        env.apply_action(Action(7, np.zeros(3), np.zeros(3)))
    with pytest.raises(RejectedActionError):
        env.apply_action(Action(0, np.array([1.0, 0, 0]), np.zeros(3)))
    with pytest.raises(RejectedActionError):
        env.apply_action(Action(0, np.zeros(3), np.array([5.0, 0, 0])))


def test_env_grasp_miss_consumes_operation():
    env = ClothEnv(EpisodeConfig(task=TaskKind.DIAGONAL_FOLD))
    env.reset(np.random.default_rng(0))
    before = env.state.positions.copy()
    # Offset within bounds but far from any particle.
    act = Action(0, np.array([-0.1, 0.1, 0.1]), np.array([0.0, 0.0, 0.0]))
    _, _, done = env.apply_action(act)
    assert env.op_count == 1
    assert np.allclose(env.state.positions, before)


def test_env_episode_terminates_at_cap():
    env = ClothEnv(EpisodeConfig(task=TaskKind.DIAGONAL_FOLD, max_ops=2))
    env.reset(np.random.default_rng(0))
    act = Action(0, np.zeros(3), np.array([0.0, 0.0, 0.0]))
    _, r1, d1 = env.apply_action(act)
    assert not d1
    _, r2, d2 = env.apply_action(act)
    assert d2
    # Final reward is the decisive value of the terminal metric.
    assert r2 == tasks.decisive_reward(TaskKind.DIAGONAL_FOLD, env.metric)


def test_flatten_reset_scrambles_cloth():
    env = ClothEnv(EpisodeConfig(task=TaskKind.FLATTEN))
    sv = env.reset(np.random.default_rng(3))
    assert sv.area_fraction < 0.9  # perturbations must crumple the cloth
