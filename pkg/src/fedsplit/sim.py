"""Federated server/client simulation.

One round: select K clients, run local training on each (optionally
measuring lookahead affinities every rho batches), then aggregate parameters
with dataset-size-weighted FedAvg and affinity matrices with a uniform mean.

The merge-and-split schedule ("mas") trains the merged multi-head model for
r0 rounds, picks the best task grouping from the score_round affinity
matrix, splits the model, and trains each group sequentially for the
remaining rounds from the merged parameters.  Baselines: all_in_one (never
split), one_by_one (independent single-task runs), standalone (per-client
local training, no aggregation).

Clients within a round are independent jobs; every random draw comes from a
stream keyed by (seed, purpose, scope, round, client), and reductions run in
ascending client order, so results are bit-reproducible regardless of how
client work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .affinity import (
    AffinityAccumulator,
    AffinityMatrix,
    NoMeasurementError,
    client_round_average,
    finalize_diagonal,
    server_aggregate,
    step_affinity,
)
from .config import ExperimentConfig
from .costs import TraceJob, TraceRound, TrainingTrace, cost_model
from .datagen import ClientDataset, gen_suite, partition_clients
from .model import MultiTaskModel, merge_tasks, reconstruct, split_model
from .partition import ScoredPartition, best_partition
from .rng import substream


# ---------------------------------------------------------------------------
# building blocks


def select_clients(
    seed: int, scope: tuple, round_idx: int, n_clients: int, k: int
) -> list[int]:
    """Uniform sample of k client indices without replacement, sorted.

    The draw comes from a stream keyed by (seed, scope, round), so it is
    reproducible and independent of any other randomness in the run.
    """
    if k > n_clients:
        raise ValueError(f"cannot select {k} of {n_clients} clients")
    gen = substream(seed, "select", *scope, round_idx)
    return sorted(int(i) for i in gen.choice(n_clients, size=k, replace=False))


@dataclass
class ClientUpdate:
    """What one client sends back after a round of local work."""

    model: MultiTaskModel
    affinity: AffinityMatrix | None
    train_losses: dict[str, float]  # mean loss per task over all local steps
    batches_per_epoch: int
    affinity_samples: int


def client_execution(
    model: MultiTaskModel,
    data: ClientDataset,
    *,
    lr: float,
    epochs: int,
    rho: int,
    shuffle_rng: np.random.Generator,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    tasks: tuple[str, ...] | None = None,
    round_tag: int = 0,
) -> ClientUpdate:
    """Local training: `epochs` passes of minibatch SGD on the joint loss.

    With rho > 0, every rho-th batch is first used for one step_affinity
    sample (measured before that batch's training update); the per-client
    average over the round's samples comes back as an AffinityMatrix, or
    None when rho = 0.  Momentum starts from zero: optimizer state is
    per-round, since clients receive fresh global parameters every round.
    """
    task_set = tuple(sorted(tasks)) if tasks is not None else model.tasks
    missing = set(task_set) - set(model.tasks)
    if missing:
        raise ValueError(f"model has no heads for tasks {sorted(missing)}")
    if rho > 0 and task_set != model.tasks:
        raise ValueError("affinity measurement requires training the full task set")

    params = model.assemble()
    state = nn.OptimizerState.fresh(params, lr, momentum, weight_decay)
    weights = {t: 1.0 for t in task_set}
    acc = AffinityAccumulator(task_set) if rho > 0 else None
    samples = 0
    loss_sums = {t: 0.0 for t in task_set}
    steps = 0
    n_batches = len(data.train_batches)

    for _ in range(epochs):
        order = shuffle_rng.permutation(n_batches)
        for position, batch_idx in enumerate(order):
            batch = data.train_batches[int(batch_idx)]
            if acc is not None and (position + 1) % rho == 0:
                live = model.with_params(params)
                acc.add(step_affinity(live, batch, lr))
                samples += 1
            grads, losses = nn.backward(params, model.arch, batch, weights=weights)
            params, state = nn.sgd_step(params, grads, state, lr)
            for t in task_set:
                loss_sums[t] += losses[t]
            steps += 1

    matrix = client_round_average(acc, round_tag=round_tag) if acc is not None else None
    return ClientUpdate(
        model=model.with_params(params),
        affinity=matrix,
        train_losses={t: loss_sums[t] / steps for t in task_set},
        batches_per_epoch=n_batches,
        affinity_samples=samples,
    )


def fedavg_aggregate(models: list[MultiTaskModel], weights: list[float]) -> MultiTaskModel:
    """Element-wise weighted mean of parameters; weights normalize to 1."""
    if not models:
        raise ValueError("fedavg_aggregate needs at least one model")
    if len(weights) != len(models) or any(w <= 0 for w in weights):
        raise ValueError("need one positive weight per model")
    first = models[0]
    for m in models[1:]:
        if m.arch != first.arch:
            raise ValueError("cannot aggregate models with different architectures")
    norm = np.asarray(weights, dtype=np.float64)
    norm = norm / norm.sum()
    total = np.zeros(first.arch.param_count())
    for w, m in zip(norm, models):
        total += w * m.assemble().values
    return first.with_params(nn.ParamVector(total, first.arch.param_layout()))


def pooled_test_losses(
    model: MultiTaskModel,
    clients: list[ClientDataset],
    tasks: tuple[str, ...] | None = None,
) -> dict[str, float]:
    """Per-task mean loss over the pooled test samples of all given clients."""
    task_set = tuple(sorted(tasks)) if tasks is not None else model.tasks
    params = model.assemble()
    sums = {t: 0.0 for t in task_set}
    rows = 0
    for client in clients:
        for batch in client.test_batches:
            fwd = nn.forward(params, model.arch, batch)
            losses = nn.losses_from_predictions(model.arch, fwd, batch, tasks=task_set)
            for t in task_set:
                sums[t] += losses[t] * batch.rows
            rows += batch.rows
    if rows == 0:
        raise ValueError("no test samples available")
    return {t: sums[t] / rows for t in task_set}


def evaluate(
    models: dict[str, MultiTaskModel], clients: list[ClientDataset]
) -> tuple[dict[str, float], float]:
    """Final metric: per-task pooled test loss plus the total over tasks."""
    per_task = {}
    for task in sorted(models):
        per_task[task] = pooled_test_losses(models[task], clients, tasks=(task,))[task]
    total = 0.0
    for task in sorted(per_task):
        total += per_task[task]
    return per_task, total


# ---------------------------------------------------------------------------
# federated phases


@dataclass
class PhaseResult:
    model: MultiTaskModel
    affinity_by_round: dict[int, AffinityMatrix]
    rows: list[dict]


def _federated_phase(
    model: MultiTaskModel,
    clients: list[ClientDataset],
    cfg: ExperimentConfig,
    *,
    scope: tuple,
    n_rounds: int,
    rho: int,
    trace: TrainingTrace,
    stage_name: str,
    phase_label: str,
    split_id: str = "",
    round_offset: int = 0,
    pool: list[int] | None = None,
    eval_tasks: tuple[str, ...] | None = None,
) -> PhaseResult:
    """Run n_rounds of select / local train / aggregate on one model."""
    stage = trace.add_stage(stage_name)
    pool = pool if pool is not None else list(range(len(clients)))
    tasks = eval_tasks if eval_tasks is not None else model.tasks
    affinity_by_round: dict[int, AffinityMatrix] = {}
    rows: list[dict] = []

    for r in range(n_rounds):
        global_round = round_offset + r
        lr = nn.poly_lr(global_round, cfg.rounds, cfg.base_lr)
        picked = select_clients(cfg.seed, scope, r, len(pool), cfg.select)
        selected = [pool[i] for i in picked]

        updates: list[ClientUpdate] = []
        trace_round = TraceRound()
        for cid in selected:
            client = clients[cid]
            update = client_execution(
                model,
                client,
                lr=lr,
                epochs=cfg.epochs,
                rho=rho,
                shuffle_rng=substream(cfg.seed, "shuffle", *scope, r, cid),
                momentum=cfg.momentum,
                weight_decay=cfg.weight_decay,
                tasks=tasks,
                round_tag=r + 1,
            )
            updates.append(update)
            trace_round.jobs.append(
                TraceJob(
                    client_id=cid,
                    active_params=model.param_count(),
                    trunk_params=model.arch.trunk_size(),
                    n_tasks=len(tasks),
                    batches=update.batches_per_epoch,
                    epochs=cfg.epochs,
                    affinity_samples=update.affinity_samples,
                )
            )
        stage.rounds.append(trace_round)

        sizes = [clients[cid].size for cid in selected]
        model = fedavg_aggregate([u.model for u in updates], sizes)

        measured = [(u.affinity, s) for u, s in zip(updates, sizes) if u.affinity is not None]
        if measured:
            matrices = [m for m, _ in measured]
            mat_weights = [s for _, s in measured] if cfg.weighted_affinity else None
            affinity_by_round[r + 1] = server_aggregate(matrices, weights=mat_weights)

        weight_total = sum(sizes)
        test = pooled_test_losses(model, clients, tasks=tasks)
        for task in tasks:
            train = sum(u.train_losses[task] * s for u, s in zip(updates, sizes)) / weight_total
            rows.append(
                {
                    "round": global_round + 1,
                    "phase": phase_label,
                    "split_id": split_id,
                    "task": task,
                    "train_loss": float(train),
                    "test_loss": float(test[task]),
                }
            )

    return PhaseResult(model=model, affinity_by_round=affinity_by_round, rows=rows)


# ---------------------------------------------------------------------------
# experiment runners


@dataclass
class ExperimentReport:
    """Everything a run produced, JSON-serializable and byte-stable."""

    method: str
    seed: int
    config: dict
    rounds: list[dict]
    final_test_losses: dict[str, float]
    final_total_test_loss: float
    partition: dict | None
    affinity_rounds: dict[str, dict]
    cost: dict
    ground_truth_clusters: list[list[str]]
    per_client: dict | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "rounds": self.rounds,
            "final_test_losses": self.final_test_losses,
            "final_total_test_loss": self.final_total_test_loss,
            "partition": self.partition,
            "affinity_rounds": self.affinity_rounds,
            "cost": self.cost,
            "ground_truth_clusters": self.ground_truth_clusters,
            "per_client": self.per_client,
        }


def build_data(cfg: ExperimentConfig):
    """Task specs, sampler, and client datasets for a config (seed-derived)."""
    specs, sampler = gen_suite(cfg.suite, cfg.seed)
    clients = partition_clients(
        sampler, cfg.clients, cfg.suite.profile, cfg.seed, cfg.batch_size
    )
    return specs, sampler, clients


def _split_pools(cfg: ExperimentConfig, n_splits: int) -> list[list[int]]:
    if not cfg.split_client_pools:
        return [list(range(cfg.clients)) for _ in range(n_splits)]
    chunks = np.array_split(np.arange(cfg.clients), n_splits)
    return [[int(c) for c in chunk] for chunk in chunks]


def _matrix_payload(matrix: AffinityMatrix) -> dict:
    return {
        "tasks": list(matrix.tasks),
        "scores": [[float(v) for v in row] for row in matrix.scores],
    }


def run_mas(cfg: ExperimentConfig) -> ExperimentReport:
    """Merge -> r0 merged rounds with affinity -> split -> per-split rounds."""
    cfg.validate()
    if cfg.method != "mas":
        raise ValueError(f"run_mas got method {cfg.method!r}")
    specs, _, clients = build_data(cfg)
    model = merge_tasks(specs, cfg.suite.input_dim, cfg.hidden_dims, cfg.seed)

    trace = TrainingTrace()
    merged = _federated_phase(
        model,
        clients,
        cfg,
        scope=("main",),
        n_rounds=cfg.r0,
        rho=cfg.rho,
        trace=trace,
        stage_name="all_in_one",
        phase_label="all_in_one",
    )

    score_matrix = merged.affinity_by_round.get(cfg.score_round)
    if score_matrix is None:
        raise NoMeasurementError(
            f"round {cfg.score_round} produced no affinity measurements "
            f"(every selected client had fewer than rho={cfg.rho} batches?)"
        )
    finalized = finalize_diagonal(score_matrix)
    chosen: ScoredPartition = best_partition(finalized, cfg.splits)

    splits = split_model(merged.model, chosen.partition)
    pools = _split_pools(cfg, len(splits))
    rows = list(merged.rows)
    final_models: list[MultiTaskModel] = []
    for j, split in enumerate(splits):
        result = _federated_phase(
            split,
            clients,
            cfg,
            scope=("split", j),
            n_rounds=cfg.rounds - cfg.r0,
            rho=0,
            trace=trace,
            stage_name=f"split_{j}",
            phase_label="split",
            split_id=str(j),
            round_offset=cfg.r0,
            pool=pools[j],
            eval_tasks=split.tasks,
        )
        rows.extend(result.rows)
        final_models.append(result.model)

    per_task, total = evaluate(reconstruct(final_models), clients)
    return ExperimentReport(
        method=cfg.method,
        seed=cfg.seed,
        config=cfg.to_dict(),
        rounds=rows,
        final_test_losses={t: float(v) for t, v in per_task.items()},
        final_total_test_loss=float(total),
        partition={
            "blocks": [list(b) for b in chosen.partition.blocks],
            "per_task_scores": {t: float(v) for t, v in chosen.per_task.items()},
            "total": float(chosen.total),
            "score_round": cfg.score_round,
        },
        affinity_rounds={
            str(tag): _matrix_payload(m) for tag, m in sorted(merged.affinity_by_round.items())
        },
        cost=cost_model(trace).to_dict(),
        ground_truth_clusters=[list(b) for b in cfg.suite.cluster_blocks()],
    )


def run_baseline(cfg: ExperimentConfig) -> ExperimentReport:
    """all_in_one, one_by_one, or standalone training for the same suite."""
    cfg.validate()
    if cfg.method not in ("all_in_one", "one_by_one", "standalone"):
        raise ValueError(f"run_baseline got method {cfg.method!r}")
    specs, _, clients = build_data(cfg)
    trace = TrainingTrace()

    if cfg.method == "all_in_one":
        model = merge_tasks(specs, cfg.suite.input_dim, cfg.hidden_dims, cfg.seed)
        phase = _federated_phase(
            model,
            clients,
            cfg,
            scope=("main",),
            n_rounds=cfg.rounds,
            rho=0,
            trace=trace,
            stage_name="all_in_one",
            phase_label="all_in_one",
        )
        per_task = pooled_test_losses(phase.model, clients)
        rows = phase.rows
        per_client = None

    elif cfg.method == "one_by_one":
        rows = []
        per_task = {}
        for spec in sorted(specs, key=lambda s: s.id):
            single = merge_tasks([spec], cfg.suite.input_dim, cfg.hidden_dims, cfg.seed)
            result = _federated_phase(
                single,
                clients,
                cfg,
                scope=("task", spec.id),
                n_rounds=cfg.rounds,
                rho=0,
                trace=trace,
                stage_name=f"task_{spec.id}",
                phase_label="one_by_one",
            )
            rows.extend(result.rows)
            per_task[spec.id] = pooled_test_losses(result.model, clients)[spec.id]
        per_client = None

    else:  # standalone: local training only, no aggregation
        model = merge_tasks(specs, cfg.suite.input_dim, cfg.hidden_dims, cfg.seed)
        rows, per_task, per_client = _run_standalone(model, clients, cfg, trace)

    total = 0.0
    for task in sorted(per_task):
        total += per_task[task]
    return ExperimentReport(
        method=cfg.method,
        seed=cfg.seed,
        config=cfg.to_dict(),
        rounds=rows,
        final_test_losses={t: float(v) for t, v in sorted(per_task.items())},
        final_total_test_loss=float(total),
        partition=None,
        affinity_rounds={},
        cost=cost_model(trace).to_dict(),
        ground_truth_clusters=[list(b) for b in cfg.suite.cluster_blocks()],
        per_client=per_client,
    )


def _run_standalone(
    model: MultiTaskModel,
    clients: list[ClientDataset],
    cfg: ExperimentConfig,
    trace: TrainingTrace,
):
    """Every client trains the merged model alone for the full round budget
    (same per-round schedule as federated training, no aggregation) and is
    evaluated on its own test split."""
    stage = trace.add_stage("standalone")
    local = {c.client_id: model for c in clients}
    rows: list[dict] = []
    tasks = model.tasks

    for r in range(cfg.rounds):
        lr = nn.poly_lr(r, cfg.rounds, cfg.base_lr)
        trace_round = TraceRound()
        train_sums = {t: 0.0 for t in tasks}
        test_sums = {t: 0.0 for t in tasks}
        for client in clients:
            update = client_execution(
                local[client.client_id],
                client,
                lr=lr,
                epochs=cfg.epochs,
                rho=0,
                shuffle_rng=substream(cfg.seed, "shuffle", "main", r, client.client_id),
                momentum=cfg.momentum,
                weight_decay=cfg.weight_decay,
                round_tag=r + 1,
            )
            local[client.client_id] = update.model
            trace_round.jobs.append(
                TraceJob(
                    client_id=client.client_id,
                    active_params=model.param_count(),
                    trunk_params=model.arch.trunk_size(),
                    n_tasks=len(tasks),
                    batches=update.batches_per_epoch,
                    epochs=cfg.epochs,
                )
            )
            own_test = pooled_test_losses(update.model, [client])
            for t in tasks:
                train_sums[t] += update.train_losses[t]
                test_sums[t] += own_test[t]
        stage.rounds.append(trace_round)
        for t in tasks:
            rows.append(
                {
                    "round": r + 1,
                    "phase": "standalone",
                    "split_id": "",
                    "task": t,
                    "train_loss": train_sums[t] / len(clients),
                    "test_loss": test_sums[t] / len(clients),
                }
            )

    per_client = {}
    per_task_sums = {t: 0.0 for t in tasks}
    for client in clients:
        own = pooled_test_losses(local[client.client_id], [client])
        per_client[str(client.client_id)] = {
            "per_task": {t: float(v) for t, v in own.items()},
            "total": float(sum(own[t] for t in tasks)),
        }
        for t in tasks:
            per_task_sums[t] += own[t]
    per_task = {t: per_task_sums[t] / len(clients) for t in tasks}
    return rows, per_task, per_client


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Dispatch a config to its method's runner."""
    cfg.validate()
    if cfg.method == "mas":
        return run_mas(cfg)
    return run_baseline(cfg)
