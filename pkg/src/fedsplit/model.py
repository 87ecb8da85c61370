"""Shared-trunk multi-head models: merge, joint loss, split, reconstruct.

A model is an immutable value between training steps.  Splitting copies the
trunk by value, so split groups can be trained concurrently without sharing
state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .rng import substream


@dataclass(frozen=True)
class TaskSpec:
    """Identity and head description of one federated task."""

    id: str
    output_dim: int
    loss: str = "mse"


@dataclass
class MultiTaskModel:
    """One shared trunk plus one parameter vector per task head."""

    arch: nn.Architecture
    trunk: nn.ParamVector
    heads: dict[str, nn.ParamVector]

    def __post_init__(self) -> None:
        if not self.heads:
            raise ValueError("model needs at least one head")
        declared = set(self.arch.task_ids)
        if set(self.heads) != declared:
            raise ValueError(
                f"head map {sorted(self.heads)} does not match declared tasks {sorted(declared)}"
            )

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.arch.task_ids

    def assemble(self) -> nn.ParamVector:
        """Pack trunk + heads (sorted task order) into one flat vector (a copy)."""
        parts = [self.trunk.values]
        for task in self.tasks:
            parts.append(self.heads[task].values)
        return nn.ParamVector(np.concatenate(parts), self.arch.param_layout())

    def with_params(self, params: nn.ParamVector) -> "MultiTaskModel":
        """New model carrying the given assembled parameter values."""
        nn._check_params_match(params, self.arch)
        trunk_size = self.arch.trunk_size()
        trunk = nn.ParamVector(params.values[:trunk_size].copy(), self.arch.trunk_layout())
        heads = {}
        offset = trunk_size
        for task in self.tasks:
            layout = self.arch.head_layout(task)
            size = sum(int(np.prod(dims)) for _, dims in layout)
            heads[task] = nn.ParamVector(params.values[offset : offset + size].copy(), layout)
            offset += size
        return MultiTaskModel(self.arch, trunk, heads)

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel(
            self.arch, self.trunk.copy(), {t: h.copy() for t, h in self.heads.items()}
        )

    def param_count(self) -> int:
        return self.arch.param_count()


def build_architecture(
    specs: Sequence[TaskSpec],
    input_dim: int,
    hidden_dims: tuple[int, int],
    activation: str = "tanh",
) -> nn.Architecture:
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate task ids: {dupes}")
    heads = tuple(sorted((s.id, s.output_dim, s.loss) for s in specs))
    return nn.Architecture(
        input_dim=input_dim,
        hidden_dims=tuple(hidden_dims),
        heads=heads,
        activation=activation,
    )


def merge_tasks(
    specs: Sequence[TaskSpec],
    input_dim: int,
    hidden_dims: tuple[int, int],
    seed: int,
    activation: str = "tanh",
) -> MultiTaskModel:
    """Merge task specs into one multi-head model with seeded initialization.

    Weights are uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out));
    biases start at zero.  Each layer draws from its own named substream, so
    the trunk init is identical across task subsets for a fixed seed.
    """
    if not specs:
        raise ValueError("merge_tasks needs at least one task spec")
    arch = build_architecture(specs, input_dim, hidden_dims, activation)
    trunk = _init_params(arch.trunk_layout(), seed)
    heads = {s.id: _init_params(arch.head_layout(s.id), seed) for s in specs}
    return MultiTaskModel(arch, trunk, heads)


def _init_params(layout: tuple[tuple[str, tuple[int, ...]], ...], seed: int) -> nn.ParamVector:
    params = nn.ParamVector.zeros(layout)
    for name, dims in layout:
        if len(dims) != 2:
            continue  # biases stay zero
        fan_in, fan_out = dims
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        gen = substream(seed, "init", name)
        np.copyto(params.view(name), gen.uniform(-bound, bound, size=dims))
    return params


def joint_loss(model: MultiTaskModel, batch: nn.Batch) -> tuple[dict[str, float], float]:
    """Per-task losses plus their unweighted sum (summed in sorted task order)."""
    for task in model.tasks:
        if task not in batch.targets:
            raise ValueError(f"joint loss requires a target for task {task!r}")
    fwd = nn.forward(model.assemble(), model.arch, batch)
    losses = nn.losses_from_predictions(model.arch, fwd, batch)
    total = 0.0
    for task in model.tasks:
        total += losses[task]
    return losses, total


def _blocks_of(partition) -> tuple[tuple[str, ...], ...]:
    blocks = getattr(partition, "blocks", partition)
    return tuple(tuple(block) for block in blocks)


def split_model(model: MultiTaskModel, partition) -> list[MultiTaskModel]:
    """Cut a model into one independent model per partition block.

    Each block's trunk is a value copy of the parent trunk; each head moves to
    the block containing its task.  Accepts a Partition or raw blocks.
    """
    blocks = _blocks_of(partition)
    covered: list[str] = [t for block in blocks for t in block]
    if len(set(covered)) != len(covered) or set(covered) != set(model.tasks) or any(
        not block for block in blocks
    ):
        raise ValueError(
            f"partition {[list(b) for b in blocks]} is not disjoint-and-exhaustive "
            f"over tasks {list(model.tasks)}"
        )
    out = []
    for block in blocks:
        heads = tuple(
            (t, model.arch.out_dim(t), model.arch.loss_kind(t)) for t in sorted(block)
        )
        arch = nn.Architecture(
            model.arch.input_dim, model.arch.hidden_dims, heads, model.arch.activation
        )
        out.append(
            MultiTaskModel(
                arch,
                model.trunk.copy(),
                {t: model.heads[t].copy() for t in block},
            )
        )
    return out


def reconstruct(splits: Iterable[MultiTaskModel]) -> dict[str, MultiTaskModel]:
    """Map every task to a single-task model: its split's trunk + its own head."""
    out: dict[str, MultiTaskModel] = {}
    for split in splits:
        for task in split.tasks:
            if task in out:
                raise ValueError(f"task {task!r} appears in more than one split")
            heads = ((task, split.arch.out_dim(task), split.arch.loss_kind(task)),)
            arch = nn.Architecture(
                split.arch.input_dim, split.arch.hidden_dims, heads, split.arch.activation
            )
            out[task] = MultiTaskModel(
                arch, split.trunk.copy(), {task: split.heads[task].copy()}
            )
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: MultiTaskModel, path: str | Path) -> None:
    """Binary checkpoint (.npz): arch descriptor + named float64 arrays.

    Round-trips bit-exactly through load_model.
    """
    arch_blob = json.dumps(
        {
            "input_dim": model.arch.input_dim,
            "hidden_dims": list(model.arch.hidden_dims),
            "heads": [list(h) for h in model.arch.heads],
            "activation": model.arch.activation,
        }
    )
    arrays = {"trunk": model.trunk.values}
    for task in model.tasks:
        arrays[f"head:{task}"] = model.heads[task].values
    np.savez(path, arch=np.array(arch_blob), **arrays)


def load_model(path: str | Path) -> MultiTaskModel:
    with np.load(path) as blob:
        meta = json.loads(str(blob["arch"]))
        arch = nn.Architecture(
            input_dim=meta["input_dim"],
            hidden_dims=tuple(meta["hidden_dims"]),
            heads=tuple((h[0], h[1], h[2]) for h in meta["heads"]),
            activation=meta["activation"],
        )
        trunk = nn.ParamVector(blob["trunk"], arch.trunk_layout())
        heads = {
            task: nn.ParamVector(blob[f"head:{task}"], arch.head_layout(task))
            for task in arch.task_ids
        }
    return MultiTaskModel(arch, trunk, heads)
