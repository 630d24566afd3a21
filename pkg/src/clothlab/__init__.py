"""Desk-scale cloth manipulation laboratory.

Spring-mass cloth simulation, receding-horizon demonstration collection,
demonstration-enhanced reinforcement learning with fuzzy grasp selection,
and an ablation/metrics harness.
"""

__version__ = "0.1.0"

from . import agent, cloth, fuzzy, geometry, harness, nmpc, nn, tasks  # noqa: F401
