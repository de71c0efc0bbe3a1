"""Behavioral type identification in repeated public goods games.

DTW-based clustering of contribution trajectories, hierarchical inverse
Q-learning over latent intentions, and a labeled synthetic simulator.
"""

__version__ = "0.1.0"
