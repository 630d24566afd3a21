"""Spring-mass cloth dynamics and the pick-and-place execution primitive.

All quantities are SI (meters, kilograms, seconds, newtons). Particles are
indexed 0-based in row-major order: row 0 is the top edge, index n*r + c.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

COINCIDENCE_TOL = 1e-9


class ClothError(Exception):
    """Base class for cloth simulation failures."""


class SpringSingularityError(ClothError):
    """Two connected particles are (numerically) coincident."""

    def __init__(self, i: int, j: int):
        super().__init__(f"particles {i} and {j} are coincident (distance < {COINCIDENCE_TOL} m)")
        self.pair = (i, j)


class IntegrationError(ClothError):
    """A non-finite force appeared during integration."""

    def __init__(self, particle: int):
        super().__init__(f"non-finite force on particle {particle}")
        self.particle = particle


class GraspMissError(ClothError):
    """The grasp point is farther than the grasp radius from every particle."""


@dataclass(frozen=True)
class MeshTopology:
    """Square cloth mesh: n x n particles joined by damped springs."""

    n: int
    edge_length: float
    stiffness: float
    damping: float
    particle_mass: float
    springs: np.ndarray      # (M, 2) int, each row i < j
    rest_lengths: np.ndarray  # (M,)
    # Fabric buckles instead of resisting compression; without this a folded
    # cloth stands up as a truss instead of lying flat.
    tension_only: bool = True

    @property
    def n_particles(self) -> int:
        return self.n * self.n

    def neighbor_sets(self) -> list[set[int]]:
        sets: list[set[int]] = [set() for _ in range(self.n_particles)]
        for i, j in self.springs:
            sets[i].add(int(j))
            sets[j].add(int(i))
        return sets

    def spring_index(self, i: int, j: int) -> int:
        a, b = min(i, j), max(i, j)
        hits = np.nonzero((self.springs[:, 0] == a) & (self.springs[:, 1] == b))[0]
        if hits.size == 0:
            raise KeyError(f"no spring between particles {i} and {j}")
        return int(hits[0])

    @classmethod
    def grid(
        cls,
        n: int = 6,
        edge_length: float = 0.24,
        stiffness: float = 80.0,
        damping: float = 0.3,
        total_mass: float = 0.05,
        shear: bool = False,
        tension_only: bool = True,
    ) -> "MeshTopology":
        """Build a row-major grid with structural (and optionally shear) springs."""
        if n < 2:
            raise ValueError("n must be >= 2")
        rest = edge_length / (n - 1)
        pairs: list[tuple[int, int]] = []
        rests: list[float] = []
        for r in range(n):
            for c in range(n):
                i = r * n + c
                if c + 1 < n:
                    pairs.append((i, i + 1))
                    rests.append(rest)
                if r + 1 < n:
                    pairs.append((i, i + n))
                    rests.append(rest)
                if shear and r + 1 < n:
                    if c + 1 < n:
                        pairs.append((i, i + n + 1))
                        rests.append(rest * np.sqrt(2.0))
                    if c > 0:
                        pairs.append((i, i + n - 1))
                        rests.append(rest * np.sqrt(2.0))
        springs = np.array([(min(a, b), max(a, b)) for a, b in pairs], dtype=np.int64)
        return cls(
            n=n,
            edge_length=edge_length,
            stiffness=stiffness,
            damping=damping,
            particle_mass=total_mass / (n * n),
            springs=springs,
            rest_lengths=np.asarray(rests, dtype=float),
            tension_only=tension_only,
        )


@dataclass(frozen=True)
class ClothState:
    positions: np.ndarray   # (N, 3)
    velocities: np.ndarray  # (N, 3)
    t: int = 0


@dataclass(frozen=True)
class SimParams:
    """Integrator and table-contact parameters.

    The explicit scheme is only stable for sufficiently small dt relative to
    sqrt(m/k) and m/c; the defaults below are chosen inside that region for
    the default grid topology.
    """

    dt: float = 2e-4
    gravity: float = 9.81
    table_height: float = 0.0
    tangential_friction: float = 0.6
    settle_speed_tol: float = 0.02
    settle_max_steps: int = 30000
    enable_table: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.settle_speed_tol <= 0:
            raise ValueError("settle_speed_tol must be positive")


@dataclass(frozen=True)
class MotionParams:
    # A low skimming carry folds far more cleanly than a high lift: the
    # hanging part of a high carry lands in a heap.
    lift_height: float = 0.01
    max_carry_speed: float = 0.25
    grasp_radius: float = 0.03


def flat_state(topo: MeshTopology, params: SimParams, center=(0.0, 0.0)) -> ClothState:
    """Flat cloth at rest on the table, centered at `center`."""
    n = topo.n
    coords = np.linspace(-topo.edge_length / 2, topo.edge_length / 2, n)
    xx, yy = np.meshgrid(coords, coords[::-1])  # row 0 at +y (top edge)
    pos = np.column_stack(
        [xx.ravel() + center[0], yy.ravel() + center[1], np.full(n * n, params.table_height)]
    )
    return ClothState(positions=pos, velocities=np.zeros_like(pos), t=0)


def spring_force(state: ClothState, i: int, j: int, topo: MeshTopology) -> np.ndarray:
    """Force on particle i from the spring to j (restoring sign convention)."""
    s = topo.spring_index(i, j)
    d = state.positions[i] - state.positions[j]
    length = float(np.linalg.norm(d))
    if length < COINCIDENCE_TOL:
        raise SpringSingularityError(i, j)
    rest = topo.rest_lengths[s]
    stretch = length - rest
    if topo.tension_only and stretch < 0.0:
        return np.zeros(3)
    return -topo.stiffness * stretch * d / length


def _internal_forces(positions: np.ndarray, velocities: np.ndarray, topo: MeshTopology) -> np.ndarray:
    si = topo.springs[:, 0]
    sj = topo.springs[:, 1]
    d = positions[si] - positions[sj]
    lengths = np.linalg.norm(d, axis=1)
    if np.any(lengths < COINCIDENCE_TOL):
        bad = int(np.argmin(lengths))
        raise SpringSingularityError(int(si[bad]), int(sj[bad]))
    stretch = lengths - topo.rest_lengths
    if topo.tension_only:
        stretch = np.maximum(stretch, 0.0)
    coef = -topo.stiffness * stretch / lengths
    f_pair = coef[:, None] * d
    f_damp = -topo.damping * (velocities[si] - velocities[sj])
    forces = np.zeros_like(positions)
    np.add.at(forces, si, f_pair + f_damp)
    np.add.at(forces, sj, -(f_pair + f_damp))
    return forces


def total_force(
    state: ClothState, external: np.ndarray, topo: MeshTopology, params: SimParams
) -> np.ndarray:
    """Spring + damping + gravity + external force on every particle."""
    external = np.asarray(external, dtype=float)
    if external.shape != state.positions.shape:
        raise ValueError(f"external forces must have shape {state.positions.shape}")
    forces = _internal_forces(state.positions, state.velocities, topo)
    forces[:, 2] -= topo.particle_mass * params.gravity
    return forces + external


def step(
    state: ClothState, external: np.ndarray, topo: MeshTopology, params: SimParams
) -> ClothState:
    """One explicit integration step (second-order Taylor position update)."""
    forces = total_force(state, external, topo, params)
    if not np.all(np.isfinite(forces)):
        bad = int(np.argwhere(~np.isfinite(forces).all(axis=1))[0, 0])
        raise IntegrationError(bad)
    accel = forces / topo.particle_mass
    dt = params.dt
    pos = state.positions + dt * state.velocities + 0.5 * dt * dt * accel
    vel = state.velocities + dt * accel
    if params.enable_table:
        below = pos[:, 2] < params.table_height
        if np.any(below):
            pos[below, 2] = params.table_height
            vz = vel[below, 2]
            vel[below, 2] = np.where(vz < 0.0, 0.0, vz)
            vel[below, :2] *= 1.0 - params.tangential_friction
    return ClothState(positions=pos, velocities=vel, t=state.t + 1)


def settle(state: ClothState, topo: MeshTopology, params: SimParams) -> ClothState:
    """Step with zero external force until the cloth is (nearly) at rest."""
    zero = np.zeros_like(state.positions)
    for _ in range(params.settle_max_steps):
        state = step(state, zero, topo, params)
        if float(np.max(np.linalg.norm(state.velocities, axis=1))) < params.settle_speed_tol:
            break
    return state


def nearest_particle(state: ClothState, point) -> int:
    point = np.asarray(point, dtype=float)
    dists = np.linalg.norm(state.positions - point, axis=1)
    return int(np.argmin(dists))  # argmin -> lowest index on ties


def execute_pick_place(
    state: ClothState,
    grasp_point,
    place_point,
    topo: MeshTopology,
    params: SimParams,
    motion: MotionParams = MotionParams(),
) -> tuple[ClothState, list[ClothState]]:
    """Grasp the particle nearest to `grasp_point`, carry it along a
    lift / transit / descent path to `place_point`, release, and settle.

    The grasped particle is kinematically anchored; all others integrate
    freely. Returns the settled final state and the full state trajectory.
    """
    grasp_point = np.asarray(grasp_point, dtype=float)
    place_point = np.asarray(place_point, dtype=float)
    idx = nearest_particle(state, grasp_point)
    if float(np.linalg.norm(state.positions[idx] - grasp_point)) > motion.grasp_radius:
        raise GraspMissError(
            f"no particle within {motion.grasp_radius} m of grasp point {grasp_point.tolist()}"
        )

    start = state.positions[idx].copy()
    lift_z = params.table_height + motion.lift_height
    waypoints = [
        np.array([start[0], start[1], lift_z]),
        np.array([place_point[0], place_point[1], lift_z]),
        place_point,
    ]

    trajectory = [state]
    zero = np.zeros_like(state.positions)
    anchor = start
    max_step = motion.max_carry_speed * params.dt
    for target in waypoints:
        while True:
            offset = target - anchor
            dist = float(np.linalg.norm(offset))
            if dist < 1e-12:
                break
            anchor_next = anchor + offset * min(1.0, max_step / dist)
            state = step(state, zero, topo, params)
            pos = state.positions.copy()
            vel = state.velocities.copy()
            pos[idx] = anchor_next
            vel[idx] = (anchor_next - anchor) / params.dt
            state = ClothState(positions=pos, velocities=vel, t=state.t)
            trajectory.append(state)
            anchor = anchor_next
            if dist <= max_step:
                break

    state = settle(state, topo, params)
    trajectory.append(state)
    return state, trajectory


def mechanical_energy(state: ClothState, topo: MeshTopology, params: SimParams) -> float:
    """Kinetic + spring potential + gravitational energy (joules)."""
    kinetic = 0.5 * topo.particle_mass * float(np.sum(state.velocities**2))
    si = topo.springs[:, 0]
    sj = topo.springs[:, 1]
    lengths = np.linalg.norm(state.positions[si] - state.positions[sj], axis=1)
    stretch = lengths - topo.rest_lengths
    if topo.tension_only:
        stretch = np.maximum(stretch, 0.0)
    spring = 0.5 * topo.stiffness * float(np.sum(stretch**2))
    grav = topo.particle_mass * params.gravity * float(np.sum(state.positions[:, 2]))
    return kinetic + spring + grav


def dump_trajectory(trajectory: list[ClothState], fh) -> None:
    """Write one line per step: `t x1 y1 z1 ... xN yN zN` (9 significant digits)."""
    for st in trajectory:
        flat = " ".join(format(v, ".9g") for v in st.positions.ravel())
        fh.write(f"{st.t} {flat}\n")
