"""Deterministic federated multi-task training simulator.

Trains several learning tasks at once by merging them into one shared-trunk,
multi-head model, measuring inter-task affinities during federated training,
splitting the tasks into non-overlapping groups that maximize total affinity,
and continuing each group from the merged parameters.  Includes one-by-one,
all-in-one, and standalone baselines plus an analytic time/energy cost model.
"""

__version__ = "0.1.0"
