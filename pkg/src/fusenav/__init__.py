"""PointGoal navigation workbench.

Trains mid-level-representation fusion policies in a procedurally generated
2D occupancy world and evaluates them either on directly rendered
observations or on observations replayed from a pose-indexed database built
in a perturbed clone of the same world.
"""

__version__ = "0.1.0"
