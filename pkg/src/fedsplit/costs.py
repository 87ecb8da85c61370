"""Analytic time and energy proxies for a training trace.

Units are abstract: one unit = touching one parameter once for one batch.
A training step makes TRAIN_PASSES passes (forward + backward) over the
active parameters; an affinity measurement adds, per sample, one baseline
forward plus one lookahead forward per task (n+1 forward passes over all
active parameters) and one trunk-gradient pass over the trunk parameters.

Within a round the selected clients run in parallel, so a round's time is
the maximum job cost; rounds within a stage and stages themselves are
sequential and add.  Energy has no parallelism discount: it sums every job.
"""

from __future__ import annotations

from dataclasses import dataclass, field

TRAIN_PASSES = 2.0  # forward + backward per training batch


@dataclass(frozen=True)
class TraceJob:
    """One client's work in one round."""

    client_id: int
    active_params: int  # trunk + heads of the model being trained
    trunk_params: int
    n_tasks: int
    batches: int
    epochs: int
    affinity_samples: int = 0  # lookahead measurements taken during the job

    def cost(self) -> float:
        train = TRAIN_PASSES * self.active_params * self.batches * self.epochs
        surcharge = self.affinity_samples * (
            (self.n_tasks + 1) * self.active_params + self.trunk_params
        )
        return train + surcharge


@dataclass
class TraceRound:
    jobs: list[TraceJob] = field(default_factory=list)

    def time(self) -> float:
        return max((job.cost() for job in self.jobs), default=0.0)

    def energy(self) -> float:
        return sum(job.cost() for job in self.jobs)


@dataclass
class TraceStage:
    """A sequential phase: merged training, one split, one task run, ..."""

    name: str
    rounds: list[TraceRound] = field(default_factory=list)


@dataclass
class TrainingTrace:
    stages: list[TraceStage] = field(default_factory=list)

    def add_stage(self, name: str) -> TraceStage:
        stage = TraceStage(name=name)
        self.stages.append(stage)
        return stage


@dataclass(frozen=True)
class CostSummary:
    time_by_stage: dict[str, float]
    energy_by_stage: dict[str, float]
    time_total: float
    energy_total: float

    def to_dict(self) -> dict:
        return {
            "time": {**self.time_by_stage, "total": self.time_total},
            "energy": {**self.energy_by_stage, "total": self.energy_total},
        }


def cost_model(trace: TrainingTrace) -> CostSummary:
    """Reduce a trace to time and energy proxies."""
    time_by_stage = {}
    energy_by_stage = {}
    for stage in trace.stages:
        time_by_stage[stage.name] = sum(r.time() for r in stage.rounds)
        energy_by_stage[stage.name] = sum(r.energy() for r in stage.rounds)
    return CostSummary(
        time_by_stage=time_by_stage,
        energy_by_stage=energy_by_stage,
        time_total=sum(time_by_stage.values()),
        energy_total=sum(energy_by_stage.values()),
    )
