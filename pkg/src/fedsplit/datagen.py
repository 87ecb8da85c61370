"""Synthetic multi-task suites with a known ground-truth task clustering.

Inputs are standard normal; every task's target is a linear map of a shared
latent projection of the input, plus noise.  Tasks in the same cluster share
the latent-to-target map up to a relatedness-controlled perturbation drawn
inside the cluster's own latent subspace; different clusters use mutually
orthogonal subspaces, so cross-cluster target covariance is exactly zero.
Client data is non-IID: skewed sizes plus per-client input mean shifts.
"""

from __future__ import annotations

import csv
import json
import re
import string
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .model import TaskSpec
from .rng import substream


def task_name(index: int) -> str:
    """Single-letter task ids: a, b, c, ... (one character per task)."""
    return string.ascii_lowercase[index]


@dataclass(frozen=True)
class SizeProfile:
    """How many samples each client holds.

    kind "uniform" splits total_samples evenly; "skewed" draws log-scaled
    sizes rescaled so the max/min ratio is at least skew_ratio.
    """

    kind: str = "skewed"
    total_samples: int = 5120
    skew_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "skewed"):
            raise ValueError(f"unknown size profile kind {self.kind!r}")
        if self.total_samples < 1:
            raise ValueError("total_samples must be positive")
        if self.skew_ratio < 1.0:
            raise ValueError("skew_ratio must be >= 1")

    def sizes(self, n_clients: int, gen: np.random.Generator) -> list[int]:
        if n_clients < 1:
            raise ValueError("need at least one client")
        if n_clients == 1:
            return [self.total_samples]
        if self.kind == "uniform":
            raw = np.full(n_clients, self.total_samples / n_clients)
        else:
            g = gen.standard_normal(n_clients)
            u = (g - g.min()) / (g.max() - g.min())  # in [0, 1], endpoints hit
            weights = self.skew_ratio**u
            raw = self.total_samples * weights / weights.sum()
        sizes = _round_conserving(raw, self.total_samples)
        if self.kind == "skewed":
            _enforce_ratio(sizes, self.skew_ratio)
        if min(sizes) < 1:
            raise ValueError(
                f"profile produced a zero-size client: total {self.total_samples} "
                f"over {n_clients} clients"
            )
        return sizes


def _round_conserving(raw: np.ndarray, total: int) -> list[int]:
    floors = np.floor(raw).astype(np.int64)
    remainder = raw - floors
    shortfall = int(total - floors.sum())
    order = np.argsort(-remainder, kind="stable")
    floors[order[:shortfall]] += 1
    return [int(s) for s in floors]


def _enforce_ratio(sizes: list[int], ratio: float) -> None:
    # Integer rounding can nudge max/min just under the target; move samples
    # from the smallest to the largest client until the spread is restored.
    while max(sizes) < ratio * min(sizes) and min(sizes) > 1:
        sizes[sizes.index(min(sizes))] -= 1
        sizes[sizes.index(max(sizes))] += 1


@dataclass(frozen=True)
class SuiteSpec:
    """Generative description of a task suite.

    clusters maps each task index to a cluster id; None means contiguous
    equal groups.  duplicates lists (copy, source) pairs whose targets are
    copied verbatim; negated tasks have their target map sign-flipped.
    """

    n_tasks: int = 6
    n_clusters: int = 2
    input_dim: int = 16
    latent_dim: int = 6
    out_dim: int = 2
    relatedness: float = 0.9
    noise_std: float = 0.05
    clusters: tuple[int, ...] | None = None
    duplicates: tuple[tuple[str, str], ...] = ()
    negated: tuple[str, ...] = ()
    profile: SizeProfile = field(default_factory=SizeProfile)
    client_shift_std: float = 0.25
    train_fraction: float = 0.8

    def __post_init__(self) -> None:
        if self.n_tasks < 1 or self.n_clusters < 1 or self.n_clusters > self.n_tasks:
            raise ValueError(f"bad task/cluster counts: {self.n_tasks}/{self.n_clusters}")
        if self.n_tasks > len(string.ascii_lowercase):
            raise ValueError(f"at most {len(string.ascii_lowercase)} tasks supported")
        if self.latent_dim > self.input_dim:
            raise ValueError(
                f"latent dim {self.latent_dim} exceeds input dim {self.input_dim}"
            )
        if self.latent_dim // self.n_clusters < 1:
            raise ValueError("latent_dim must provide at least one dim per cluster")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError(f"relatedness must be in [0, 1], got {self.relatedness}")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.clusters is not None and len(self.clusters) != self.n_tasks:
            raise ValueError("clusters must assign every task")
        known = set(self.task_ids())
        for dup, src in self.duplicates:
            if dup not in known or src not in known or dup == src:
                raise ValueError(f"bad duplicate pair ({dup!r}, {src!r})")
        if any(t not in known for t in self.negated):
            raise ValueError(f"negated lists unknown tasks: {self.negated}")
        assignment = self.cluster_of()
        for c in range(self.n_clusters):
            if c not in assignment.values():
                raise ValueError(f"cluster {c} is empty")

    def task_ids(self) -> tuple[str, ...]:
        return tuple(task_name(i) for i in range(self.n_tasks))

    def cluster_of(self) -> dict[str, int]:
        ids = self.task_ids()
        if self.clusters is not None:
            return dict(zip(ids, self.clusters))
        per = (self.n_tasks + self.n_clusters - 1) // self.n_clusters
        return {tid: min(i // per, self.n_clusters - 1) for i, tid in enumerate(ids)}

    def cluster_blocks(self) -> tuple[tuple[str, ...], ...]:
        """Ground-truth grouping, canonical form (the generative clustering)."""
        assignment = self.cluster_of()
        blocks = []
        for c in range(self.n_clusters):
            block = tuple(sorted(t for t, ci in assignment.items() if ci == c))
            if block:
                blocks.append(block)
        return tuple(sorted(blocks, key=lambda b: b[0]))


@dataclass
class TaskSampler:
    """Frozen generative maps of a suite; draws (inputs, targets) on demand."""

    spec: SuiteSpec
    latent_proj: np.ndarray  # (latent_dim, input_dim), orthonormal rows
    task_maps: dict[str, np.ndarray]  # task id -> (out_dim, latent_dim)

    def sample(
        self,
        n: int,
        gen: np.random.Generator,
        mean_shift: np.ndarray | None = None,
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        spec = self.spec
        x = gen.standard_normal((n, spec.input_dim))
        if mean_shift is not None:
            x = x + mean_shift
        z = x @ self.latent_proj.T
        dup_of = dict(spec.duplicates)
        targets: dict[str, np.ndarray] = {}
        for tid in spec.task_ids():
            if tid in dup_of:
                continue
            y = z @ self.task_maps[tid].T
            if spec.noise_std > 0:
                y = y + spec.noise_std * gen.standard_normal(y.shape)
            targets[tid] = y
        for dup, src in spec.duplicates:
            targets[dup] = targets[src].copy()
        return x, targets


def gen_suite(spec: SuiteSpec, seed: int) -> tuple[list[TaskSpec], TaskSampler]:
    """Build task specs plus a deterministic data sampler for the suite.

    Each cluster owns a disjoint slice of latent coordinates; a task's map is
    the convex mix  relatedness * cluster_base + (1 - relatedness) * own_draw,
    both drawn inside that slice, so relatedness 1 gives identical maps and
    cross-cluster maps stay exactly orthogonal at any relatedness.
    """
    gauss = substream(seed, "suite", "proj").standard_normal((spec.input_dim, spec.latent_dim))
    q, _ = np.linalg.qr(gauss)
    latent_proj = q.T  # orthonormal rows: latent = proj @ x has identity covariance

    width = spec.latent_dim // spec.n_clusters
    bases = {
        c: _unit_rows(substream(seed, "suite", "cluster", c).standard_normal((spec.out_dim, width)))
        for c in range(spec.n_clusters)
    }
    assignment = spec.cluster_of()
    task_maps: dict[str, np.ndarray] = {}
    for tid in spec.task_ids():
        c = assignment[tid]
        own = _unit_rows(
            substream(seed, "suite", "task", tid).standard_normal((spec.out_dim, width))
        )
        coeff = spec.relatedness * bases[c] + (1.0 - spec.relatedness) * own
        full = np.zeros((spec.out_dim, spec.latent_dim))
        full[:, c * width : (c + 1) * width] = coeff
        if tid in spec.negated:
            full = -full
        task_maps[tid] = full

    specs = [TaskSpec(id=tid, output_dim=spec.out_dim, loss="mse") for tid in spec.task_ids()]
    return specs, TaskSampler(spec=spec, latent_proj=latent_proj, task_maps=task_maps)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# client partitioning


@dataclass
class ClientDataset:
    """One client's local data, already cut into batches."""

    client_id: int
    train_batches: list[nn.Batch]
    test_batches: list[nn.Batch]
    size: int  # training sample count; basis of the aggregation weight

    def __post_init__(self) -> None:
        rows = sum(b.rows for b in self.train_batches)
        if rows != self.size or self.size <= 0:
            raise ValueError(
                f"client {self.client_id}: size {self.size} != train rows {rows} or empty"
            )


def partition_clients(
    sampler: TaskSampler,
    n_clients: int,
    profile: SizeProfile | None = None,
    seed: int = 0,
    batch_size: int = 16,
) -> list[ClientDataset]:
    """Draw every client's local dataset: skewed sizes, per-client feature
    shift, fixed train/test split, consecutive batches of batch_size."""
    spec = sampler.spec
    profile = profile if profile is not None else spec.profile
    sizes = profile.sizes(n_clients, substream(seed, "sizes"))
    clients = []
    for k in range(n_clients):
        shift = None
        if spec.client_shift_std > 0:
            shift = spec.client_shift_std * substream(seed, "shift", k).standard_normal(
                spec.input_dim
            )
        x, targets = sampler.sample(sizes[k], substream(seed, "client", k), shift)
        n_train = int(round(spec.train_fraction * sizes[k]))
        if n_train < 1 or sizes[k] - n_train < 1:
            raise ValueError(
                f"client {k}: {sizes[k]} samples cannot honor train fraction "
                f"{spec.train_fraction}"
            )
        train = _make_batches(x[:n_train], {t: y[:n_train] for t, y in targets.items()}, batch_size)
        test = _make_batches(x[n_train:], {t: y[n_train:] for t, y in targets.items()}, batch_size)
        clients.append(
            ClientDataset(client_id=k, train_batches=train, test_batches=test, size=n_train)
        )
    return clients


def _make_batches(
    x: np.ndarray, targets: dict[str, np.ndarray], batch_size: int
) -> list[nn.Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    batches = []
    for start in range(0, x.shape[0], batch_size):
        stop = start + batch_size
        batches.append(
            nn.Batch(x[start:stop], {t: y[start:stop] for t, y in targets.items()})
        )
    return batches


# ---------------------------------------------------------------------------
# frozen-suite export / import


def export_suite(
    clients: list[ClientDataset],
    task_specs: list[TaskSpec],
    out_dir: str | Path,
    batch_size: int,
    spec: SuiteSpec | None = None,
    seed: int | None = None,
) -> None:
    """Write per-client CSVs plus a JSON manifest so runs can be replayed
    from frozen data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "batch_size": batch_size,
        "n_clients": len(clients),
        "tasks": [[s.id, s.output_dim, s.loss] for s in task_specs],
        "sizes": [c.size for c in clients],
        "seed": seed,
        "spec": asdict(spec) if spec is not None else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for client in clients:
        for kind, batches in (("train", client.train_batches), ("test", client.test_batches)):
            _write_client_csv(out / f"client_{client.client_id:03d}_{kind}.csv", batches, task_specs)


def _write_client_csv(path: Path, batches: list[nn.Batch], task_specs: list[TaskSpec]) -> None:
    input_dim = batches[0].inputs.shape[1]
    header = [f"x{i}" for i in range(input_dim)]
    for s in sorted(task_specs, key=lambda s: s.id):
        header.extend(f"{s.id}_y{j}" for j in range(s.output_dim))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for batch in batches:
            for r in range(batch.rows):
                row = [repr(float(v)) for v in batch.inputs[r]]
                for s in sorted(task_specs, key=lambda s: s.id):
                    row.extend(repr(float(v)) for v in batch.targets[s.id][r])
                writer.writerow(row)


def import_suite(in_dir: str | Path) -> tuple[list[TaskSpec], list[ClientDataset]]:
    """Rebuild task specs and client datasets from an exported directory.

    Arrays round-trip bit-exactly (full-precision float repr in the CSVs) and
    batches are re-cut with the manifest's batch size, so an imported suite
    reproduces the original run.
    """
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    task_specs = [TaskSpec(id=t[0], output_dim=t[1], loss=t[2]) for t in manifest["tasks"]]
    batch_size = manifest["batch_size"]
    clients = []
    for k in range(manifest["n_clients"]):
        train_x, train_y = _read_client_csv(src / f"client_{k:03d}_train.csv", task_specs)
        test_x, test_y = _read_client_csv(src / f"client_{k:03d}_test.csv", task_specs)
        clients.append(
            ClientDataset(
                client_id=k,
                train_batches=_make_batches(train_x, train_y, batch_size),
                test_batches=_make_batches(test_x, test_y, batch_size),
                size=train_x.shape[0],
            )
        )
    return task_specs, clients


def _read_client_csv(
    path: Path, task_specs: list[TaskSpec]
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=np.float64)
    input_dim = sum(1 for h in header if re.fullmatch(r"x\d+", h))
    x = data[:, :input_dim]
    targets = {}
    offset = input_dim
    for s in sorted(task_specs, key=lambda s: s.id):
        targets[s.id] = data[:, offset : offset + s.output_dim]
        offset += s.output_dim
    return x, targets
