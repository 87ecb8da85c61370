"""Exhaustive task grouping: enumerate set partitions, score, take the argmax.

The search space for n tasks into exactly x non-empty blocks is the Stirling
number S(n, x) — e.g. 15 groupings of 5 tasks into 2 blocks — small enough
that plain enumeration doubles as its own correctness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from .affinity import AffinityMatrix

# Enumeration refuses above this task count unless the caller raises it:
# Bell(14) is ~1.9e8 candidate partitions.
DEFAULT_MAX_TASKS = 14


@dataclass(frozen=True)
class Partition:
    """Disjoint, exhaustive grouping of task ids into non-empty blocks.

    Canonical form: members sorted within each block, blocks sorted by their
    smallest member.
    """

    blocks: tuple[tuple, ...]

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence]) -> "Partition":
        canon = tuple(sorted((tuple(sorted(b)) for b in blocks), key=lambda b: b[0]))
        p = cls(canon)
        members = [t for block in canon for t in block]
        if any(not block for block in canon):
            raise ValueError("partition blocks must be non-empty")
        if len(set(members)) != len(members):
            raise ValueError(f"partition blocks overlap: {canon}")
        return p

    @property
    def members(self) -> tuple:
        return tuple(sorted(t for block in self.blocks for t in block))

    def validate_cover(self, tasks: Sequence) -> None:
        if self.members != tuple(sorted(tasks)):
            raise ValueError(
                f"partition covers {list(self.members)}, expected exactly {sorted(tasks)}"
            )

    def block_of(self, task) -> tuple:
        for block in self.blocks:
            if task in block:
                return block
        raise KeyError(task)


@dataclass(frozen=True)
class ScoredPartition:
    """A partition plus its per-task incoming-affinity scores and their sum."""

    partition: Partition
    per_task: dict
    total: float


def enumerate_partitions(items: int | Sequence, x: int) -> Iterator[Partition]:
    """Yield every partition of `items` into exactly x non-empty blocks.

    Each partition appears exactly once, in canonical order (restricted
    growth sequence order).  An int n stands for items 0..n-1.
    """
    seq = tuple(range(items)) if isinstance(items, int) else tuple(sorted(items))
    n = len(seq)
    if len(set(seq)) != n:
        raise ValueError(f"items contain duplicates: {seq}")
    if x < 1 or x > n:
        raise ValueError(f"block count {x} must be in [1, {n}]")

    blocks: list[list] = []

    def place(i: int) -> Iterator[Partition]:
        if len(blocks) + (n - i) < x:
            return  # not enough items left to open the remaining blocks
        if i == n:
            if len(blocks) == x:
                yield Partition(tuple(tuple(b) for b in blocks))
            return
        for block in blocks:
            block.append(seq[i])
            yield from place(i + 1)
            block.pop()
        if len(blocks) < x:
            blocks.append([seq[i]])
            yield from place(i + 1)
            blocks.pop()

    yield from place(0)


def split_score(partition: Partition, matrix: AffinityMatrix) -> ScoredPartition:
    """Score a partition by total incoming affinity.

    A task in a block of size m >= 2 scores the mean affinity onto it from
    its m-1 block mates; a singleton task scores its self-affinity diagonal
    entry.  The total sums per-task scores in sorted task order.
    """
    partition.validate_cover(matrix.tasks)
    per_task: dict = {}
    for block in partition.blocks:
        if len(block) == 1:
            if not matrix.diagonal_final:
                raise ValueError(
                    f"singleton block {block} needs a finalized self-affinity diagonal"
                )
            task = block[0]
            per_task[task] = float(matrix.scores[matrix.index(task), matrix.index(task)])
        else:
            for task in block:
                j = matrix.index(task)
                incoming = [matrix.scores[matrix.index(o), j] for o in block if o != task]
                per_task[task] = float(sum(incoming) / len(incoming))
    total = 0.0
    for task in sorted(per_task):
        total += per_task[task]
    return ScoredPartition(partition=partition, per_task=per_task, total=total)


def best_partition(
    matrix: AffinityMatrix, x: int, max_tasks: int = DEFAULT_MAX_TASKS
) -> ScoredPartition:
    """Exhaustive argmax of split_score over all partitions into x blocks.

    Deterministic: ties go to the first partition in canonical enumeration
    order.
    """
    n = matrix.n
    if n > max_tasks:
        raise ValueError(
            f"{n} tasks exceeds the enumeration guard ({max_tasks}); "
            f"pass max_tasks explicitly to raise it"
        )
    best: ScoredPartition | None = None
    for candidate in enumerate_partitions(matrix.tasks, x):
        scored = split_score(candidate, matrix)
        if best is None or scored.total > best.total:
            best = scored
    assert best is not None  # enumerate_partitions yields >= 1 partition
    return best
