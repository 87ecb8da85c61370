"""Dense-tensor math for small shared-trunk multi-head networks.

Float64 everywhere.  Every operation is a pure function of its inputs, so
forward, backward, and optimizer steps are bit-reproducible for identical
arguments and safe to run from concurrent workers on disjoint data.

The layer menu is fixed: two fully-connected trunk layers with tanh
activations feeding one linear output head per task.  Gradients are computed
by hand for exactly this menu; there is no general-purpose autodiff here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLY_DECAY_POWER = 0.9


class NonFiniteError(RuntimeError):
    """A loss, gradient, or parameter update produced NaN or Inf."""


# ---------------------------------------------------------------------------
# losses
#
# Each loss maps (predictions, targets) -> (scalar mean loss, d loss / d pred).
# The scalar is the mean over all elements of the prediction matrix.


def _mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    resid = pred - target
    loss = float(np.mean(resid * resid))
    return loss, (2.0 / resid.size) * resid


def _pseudo_huber(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> tuple[float, np.ndarray]:
    resid = pred - target
    root = np.sqrt(1.0 + (resid / delta) ** 2)
    loss = float(np.mean(delta * delta * (root - 1.0)))
    return loss, resid / (root * resid.size)


LOSS_KINDS = {
    "mse": _mse,
    "huber": _pseudo_huber,
}

# activation -> (apply, derivative as a function of the activation output)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class ParamVector:
    """Flat float64 parameter array plus (layer id, dims) metadata.

    The flat buffer is the single source of truth; `view(name)` returns a
    reshaped view into it, so element-wise math on `values` is element-wise
    math on every layer.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    _slices: dict[str, slice] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"values must be flat, got shape {self.values.shape}")
        slices: dict[str, slice] = {}
        offset = 0
        for name, dims in self.layout:
            if name in slices:
                raise ValueError(f"duplicate layer id {name!r} in layout")
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            slices[name] = slice(offset, offset + size)
            offset += size
        if offset != self.values.size:
            raise ValueError(
                f"layout describes {offset} elements but values holds {self.values.size}"
            )
        self._slices = slices

    @classmethod
    def zeros(cls, layout: tuple[tuple[str, tuple[int, ...]], ...]) -> "ParamVector":
        total = sum(int(np.prod(dims, dtype=np.int64)) for _, dims in layout)
        return cls(np.zeros(total), layout)

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layout)

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def view(self, name: str) -> np.ndarray:
        for layer, dims in self.layout:
            if layer == name:
                return self.values[self._slices[name]].reshape(dims)
        raise KeyError(f"no layer {name!r}; known layers: {self.names()}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def check_finite(self, context: str) -> None:
        if not np.all(np.isfinite(self.values)):
            bad = [name for name, _ in self.layout if not np.all(np.isfinite(self.view(name)))]
            raise NonFiniteError(f"non-finite values in {context}: layers {bad}")


@dataclass
class Batch:
    """One minibatch: inputs plus a per-task target map."""

    inputs: np.ndarray
    targets: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-d [rows x input_dim], got {self.inputs.shape}")
        rows = self.inputs.shape[0]
        for task, target in self.targets.items():
            arr = np.asarray(target, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != rows:
                raise ValueError(
                    f"target for task {task!r} has shape {arr.shape}, expected ({rows}, out_dim)"
                )
            self.targets[task] = arr

    @property
    def rows(self) -> int:
        return self.inputs.shape[0]


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Architecture:
    """Descriptor of a shared-trunk multi-head network.

    heads: (task id, output dim, loss kind) sorted by task id.  The trunk is
    input_dim -> hidden[0] -> hidden[1] with the chosen activation after each
    layer (tanh by default; identity gives a purely linear net); every head
    is one linear layer hidden[1] -> output dim.
    """

    input_dim: int
    hidden_dims: tuple[int, int]
    heads: tuple[tuple[str, int, str], ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("architecture dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        ids = [h[0] for h in self.heads]
        if not ids:
            raise ValueError("architecture needs at least one head")
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise ValueError(f"head ids must be sorted and unique, got {ids}")
        for task, out_dim, loss in self.heads:
            if out_dim < 1:
                raise ValueError(f"head {task!r} has non-positive output dim {out_dim}")
            if loss not in LOSS_KINDS:
                raise ValueError(f"head {task!r} has unknown loss kind {loss!r}")

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(h[0] for h in self.heads)

    def loss_kind(self, task: str) -> str:
        for tid, _, loss in self.heads:
            if tid == task:
                return loss
        raise KeyError(task)

    def out_dim(self, task: str) -> int:
        for tid, out_dim, _ in self.heads:
            if tid == task:
                return out_dim
        raise KeyError(task)

    def trunk_layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        h1, h2 = self.hidden_dims
        return (
            ("trunk.0.w", (self.input_dim, h1)),
            ("trunk.0.b", (h1,)),
            ("trunk.1.w", (h1, h2)),
            ("trunk.1.b", (h2,)),
        )

    def head_layout(self, task: str) -> tuple[tuple[str, tuple[int, ...]], ...]:
        h2 = self.hidden_dims[1]
        return (
            (f"head.{task}.w", (h2, self.out_dim(task))),
            (f"head.{task}.b", (self.out_dim(task),)),
        )

    def param_layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        layout = list(self.trunk_layout())
        for task, _, _ in self.heads:
            layout.extend(self.head_layout(task))
        return tuple(layout)

    def trunk_size(self) -> int:
        return sum(int(np.prod(dims)) for _, dims in self.trunk_layout())

    def param_count(self) -> int:
        return sum(int(np.prod(dims)) for _, dims in self.param_layout())


def _check_params_match(params: ParamVector, arch: Architecture) -> None:
    expected = arch.param_layout()
    if params.layout != expected:
        for got, want in zip(params.layout, expected):
            if got != want:
                raise ValueError(
                    f"parameter layout mismatch at layer {want[0]!r}: "
                    f"params carry {got}, architecture expects {want}"
                )
        raise ValueError(
            f"parameter layout has {len(params.layout)} layers, "
            f"architecture expects {len(expected)}"
        )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardPass:
    """Activations of one forward evaluation: trunk outputs per layer plus
    per-task predictions."""

    inputs: np.ndarray
    activations: tuple[np.ndarray, ...]
    predictions: dict[str, np.ndarray]


def forward(params: ParamVector, arch: Architecture, batch: Batch) -> ForwardPass:
    """Evaluate the network on a batch; deterministic for fixed inputs."""
    _check_params_match(params, arch)
    x = batch.inputs
    if x.shape[1] != arch.input_dim:
        raise ValueError(
            f"input dim mismatch: batch provides {x.shape[1]} features, "
            f"layer trunk.0.w expects {arch.input_dim}"
        )
    act, _ = ACTIVATIONS[arch.activation]
    a1 = act(x @ params.view("trunk.0.w") + params.view("trunk.0.b"))
    a2 = act(a1 @ params.view("trunk.1.w") + params.view("trunk.1.b"))
    preds = {}
    for task, _, _ in arch.heads:
        preds[task] = a2 @ params.view(f"head.{task}.w") + params.view(f"head.{task}.b")
    return ForwardPass(inputs=x, activations=(a1, a2), predictions=preds)


def losses_from_predictions(
    arch: Architecture,
    fwd: ForwardPass,
    batch: Batch,
    tasks: tuple[str, ...] | None = None,
) -> dict[str, float]:
    """Per-task mean losses for the given forward pass (no gradients)."""
    out: dict[str, float] = {}
    for task in tasks if tasks is not None else arch.task_ids:
        if task not in batch.targets:
            raise ValueError(f"batch carries no target for task {task!r}")
        loss, _ = LOSS_KINDS[arch.loss_kind(task)](fwd.predictions[task], batch.targets[task])
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss for task {task!r}")
        out[task] = loss
    return out


def backward(
    params: ParamVector,
    arch: Architecture,
    batch: Batch,
    weights: dict[str, float] | None = None,
    fwd: ForwardPass | None = None,
) -> tuple[ParamVector, dict[str, float]]:
    """Gradient of the weighted total loss w.r.t. every parameter.

    weights defaults to 1.0 for every head; restricting it to a subset
    yields that subset's gradient with all other layers' gradients zero.
    Returns (gradients, per-task unweighted losses).
    """
    if fwd is None:
        fwd = forward(params, arch, batch)
    if weights is None:
        weights = {task: 1.0 for task in arch.task_ids}

    grads = ParamVector.zeros(arch.param_layout())
    a1, a2 = fwd.activations
    losses: dict[str, float] = {}
    d_a2 = np.zeros_like(a2)
    for task in sorted(weights):
        if task not in batch.targets:
            raise ValueError(f"batch carries no target for task {task!r}")
        loss, d_pred = LOSS_KINDS[arch.loss_kind(task)](fwd.predictions[task], batch.targets[task])
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss for task {task!r}")
        losses[task] = loss
        d_pred = weights[task] * d_pred
        np.copyto(grads.view(f"head.{task}.w"), a2.T @ d_pred)
        np.copyto(grads.view(f"head.{task}.b"), d_pred.sum(axis=0))
        d_a2 += d_pred @ params.view(f"head.{task}.w").T

    _, dact = ACTIVATIONS[arch.activation]
    d_z2 = d_a2 * dact(a2)
    np.copyto(grads.view("trunk.1.w"), a1.T @ d_z2)
    np.copyto(grads.view("trunk.1.b"), d_z2.sum(axis=0))
    d_a1 = d_z2 @ params.view("trunk.1.w").T
    d_z1 = d_a1 * dact(a1)
    np.copyto(grads.view("trunk.0.w"), fwd.inputs.T @ d_z1)
    np.copyto(grads.view("trunk.0.b"), d_z1.sum(axis=0))
    return grads, losses


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Heavy-ball momentum buffer mirroring the parameter vector, plus the
    hyperparameters it was created with."""

    momentum: np.ndarray
    base_lr: float
    momentum_coef: float
    weight_decay: float

    @classmethod
    def fresh(
        cls,
        params: ParamVector,
        base_lr: float,
        momentum_coef: float = 0.9,
        weight_decay: float = 1e-4,
    ) -> "OptimizerState":
        if not 0.0 <= momentum_coef < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum_coef}")
        if weight_decay < 0.0:
            raise ValueError(f"weight decay must be >= 0, got {weight_decay}")
        return cls(np.zeros(params.size), base_lr, momentum_coef, weight_decay)


def sgd_step(
    params: ParamVector,
    grads: ParamVector,
    state: OptimizerState,
    lr: float,
) -> tuple[ParamVector, OptimizerState]:
    """One SGD step: v <- m*v + g + wd*p; p <- p - lr*v.

    Weight decay enters the gradient before the momentum buffer (classic
    heavy-ball form).  Pure: returns new params and state.
    """
    if params.layout != grads.layout:
        raise ValueError("params and grads have different layouts")
    if state.momentum.size != params.size:
        raise ValueError(
            f"momentum buffer has {state.momentum.size} elements, params {params.size}"
        )
    velocity = state.momentum_coef * state.momentum + grads.values
    if state.weight_decay:
        velocity += state.weight_decay * params.values
    updated = ParamVector(params.values - lr * velocity, params.layout)
    updated.check_finite("sgd_step update")
    return updated, OptimizerState(velocity, state.base_lr, state.momentum_coef, state.weight_decay)


def poly_lr(round_idx: int, total_rounds: int, eta0: float) -> float:
    """Polynomial decay eta0 * (1 - r/R)^0.9."""
    if total_rounds <= 0:
        raise ValueError(f"total_rounds must be positive, got {total_rounds}")
    if round_idx < 0 or round_idx > total_rounds:
        raise ValueError(f"round {round_idx} outside [0, {total_rounds}]")
    return eta0 * (1.0 - round_idx / total_rounds) ** POLY_DECAY_POWER
