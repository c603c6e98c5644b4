"""Plan2vec: distilling graph search over offline trajectories into a goal-conditioned metric."""

__version__ = "0.1.0"
