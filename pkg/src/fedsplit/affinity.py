"""Inter-task affinity via shared-trunk gradient lookahead.

For each source task i, take one plain gradient step on the trunk alone
(heads frozen, no momentum, no weight decay) and record the relative loss
drop 1 - after/before this causes for every task j on the same batch.
Positive means i's update helps j.  Per-step matrices are averaged over time
steps, local epochs, and clients; the diagonal is then overridden with the
normalized mutual affinity of each task with all others (self-affinity), so
single-task groups can be scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .model import MultiTaskModel

# Loss denominators at or below this are treated as "no signal": the sample
# is skipped for that target column rather than dividing by ~0.
EPS_LOSS = 1e-12


class NoMeasurementError(RuntimeError):
    """An affinity average was requested where nothing was measured."""


def relative_loss_drop(before: float, after: float) -> float:
    """1 - after/before: the fraction of task loss removed by a lookahead step."""
    return 1.0 - after / before


@dataclass
class AffinityMatrix:
    """n x n aggregated affinity scores, indexed (source i -> target j)."""

    tasks: tuple[str, ...]
    scores: np.ndarray
    round_tag: int = 0
    diagonal_final: bool = False

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.tasks)
        if tuple(sorted(self.tasks)) != self.tasks:
            raise ValueError(f"task order must be sorted, got {self.tasks}")
        if self.scores.shape != (n, n):
            raise ValueError(f"scores shape {self.scores.shape} does not match {n} tasks")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("affinity scores must be finite")

    @property
    def n(self) -> int:
        return len(self.tasks)

    def index(self, task: str) -> int:
        return self.tasks.index(task)

    def score(self, source: str, target: str) -> float:
        return float(self.scores[self.index(source), self.index(target)])


@dataclass
class AffinityAccumulator:
    """Running per-pair sums of step matrices within one client round.

    Skipped samples (NaN entries in a step matrix) reduce that pair's own
    sample count, so each pair is renormalized by the measurements it
    actually received.
    """

    tasks: tuple[str, ...]
    sums: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    events: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        n = len(self.tasks)
        if n < 2:
            raise ValueError("affinity is defined for 2 or more tasks")
        self.sums = np.zeros((n, n))
        self.counts = np.zeros((n, n), dtype=np.int64)

    def add(self, step_matrix: np.ndarray) -> "AffinityAccumulator":
        m = np.asarray(step_matrix, dtype=np.float64)
        n = len(self.tasks)
        if m.shape != (n, n):
            raise ValueError(f"step matrix shape {m.shape} does not match {n} tasks")
        if np.any(np.isinf(m)):
            raise ValueError("step matrix contains infinities")
        valid = ~np.isnan(m)
        self.sums[valid] += m[valid]
        self.counts += valid
        self.events += 1
        return self


def accumulate(acc: AffinityAccumulator, step_matrix: np.ndarray) -> AffinityAccumulator:
    """Fold one step matrix into the running sums; NaN entries are skips."""
    return acc.add(step_matrix)


def client_round_average(acc: AffinityAccumulator, round_tag: int = 0) -> AffinityMatrix | None:
    """Element-wise mean over the E*T samples of one client round.

    Returns None when nothing was measured (e.g. rho = 0), never a zero
    matrix pretending to be data.
    """
    if acc.events == 0:
        return None
    if np.any(acc.counts == 0):
        i, j = np.argwhere(acc.counts == 0)[0]
        raise NoMeasurementError(
            f"pair {acc.tasks[i]}->{acc.tasks[j]} received no valid samples "
            f"in {acc.events} measurement events"
        )
    return AffinityMatrix(acc.tasks, acc.sums / acc.counts, round_tag=round_tag)


def server_aggregate(
    client_matrices: list[AffinityMatrix],
    weights: list[float] | None = None,
) -> AffinityMatrix:
    """Mean of per-client matrices, unweighted by default.

    Callers pass matrices in ascending client order; the reduction follows
    list order, keeping floating-point results independent of which client
    finished first.
    """
    if not client_matrices:
        raise ValueError("server_aggregate needs at least one client matrix")
    first = client_matrices[0]
    for m in client_matrices[1:]:
        if m.tasks != first.tasks:
            raise ValueError(f"task order mismatch: {m.tasks} vs {first.tasks}")
        if m.round_tag != first.round_tag:
            raise ValueError(f"round tag mismatch: {m.round_tag} vs {first.round_tag}")
    if weights is None:
        w = np.full(len(client_matrices), 1.0 / len(client_matrices))
    else:
        if len(weights) != len(client_matrices) or any(x <= 0 for x in weights):
            raise ValueError("weights must be positive, one per matrix")
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    total = np.zeros_like(first.scores)
    for wk, m in zip(w, client_matrices):
        total += wk * m.scores
    return AffinityMatrix(first.tasks, total, round_tag=first.round_tag)


def finalize_diagonal(matrix: AffinityMatrix) -> AffinityMatrix:
    """Override the diagonal with each task's self-affinity.

    Entry (i, i) becomes sum_{j != i} (S[i,j] + S[j,i]) / (2n - 2): the
    normalized affinity of task i onto the others and of the others onto i.
    Off-diagonals are untouched; applying twice is a no-op.
    """
    n = matrix.n
    if n < 2:
        raise ValueError("self-affinity is undefined for a single task")
    scores = matrix.scores.copy()
    off_diag = scores - np.diag(np.diag(scores))
    diag = (off_diag.sum(axis=1) + off_diag.sum(axis=0)) / (2 * n - 2)
    np.fill_diagonal(scores, diag)
    return AffinityMatrix(matrix.tasks, scores, round_tag=matrix.round_tag, diagonal_final=True)


def step_affinity(model: MultiTaskModel, batch: nn.Batch, lr: float) -> np.ndarray:
    """One-step affinity matrix S[i, j] on a single batch.

    For each source task i: compute i's gradient w.r.t. the trunk only, form
    a lookahead trunk with one plain gradient step at lr, and record every
    task j's relative loss drop under the lookahead trunk with j's current
    head.  No persistent state is touched: the model's parameters, any
    optimizer buffers, and RNG streams are all bit-identical on exit.

    Targets with baseline loss <= EPS_LOSS yield a NaN column (skipped
    sample).  Diagonal entries are raw Eq.-style values; aggregation later
    replaces them via finalize_diagonal.
    """
    tasks = model.tasks
    n = len(tasks)
    if n < 2:
        raise ValueError("step_affinity needs a model with at least 2 heads")
    params = model.assemble()
    arch = model.arch
    fwd = nn.forward(params, arch, batch)
    before = nn.losses_from_predictions(arch, fwd, batch)
    trunk = slice(0, arch.trunk_size())

    scores = np.full((n, n), np.nan)
    measurable = [j for j, t in enumerate(tasks) if before[t] > EPS_LOSS]
    for i, source in enumerate(tasks):
        grads, _ = nn.backward(params, arch, batch, weights={source: 1.0}, fwd=fwd)
        lookahead = params.copy()
        lookahead.values[trunk] -= lr * grads.values[trunk]
        after = nn.losses_from_predictions(arch, nn.forward(lookahead, arch, batch), batch)
        for j in measurable:
            target = tasks[j]
            scores[i, j] = relative_loss_drop(before[target], after[target])
    return scores


def write_affinity_csv(matrix: AffinityMatrix, path: str | Path) -> None:
    """One row per source task; header row carries the task ids."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", *matrix.tasks])
        for i, task in enumerate(matrix.tasks):
            writer.writerow([task, *(repr(float(v)) for v in matrix.scores[i])])
