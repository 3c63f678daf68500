"""Multi-gate mixture of experts over token features.

Each layer owns a bank of expert MLPs with fixed roles: the first
``num_shared`` experts serve every sample, the rest split evenly into
per-diagnosis-class groups (NC, MCI, AD in that order). Expert outputs are
combined under one of two routing modes:

* fixed weights — a constant simplex row per sample, used during masked
  pretraining (label-guided mixing, or single-class routing for the
  specialization loss). Experts whose weight is zero across the whole
  batch are skipped, so they receive no gradient at all.
* task gates — learned per-task softmax gates ("diagnosis" and "change")
  over a feature-level attention summary of the tokens, used during
  fine-tuning. Gate parameters are independent between tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import DIAG_NAMES
from .errors import ContractError, ShapeError
from .numerics import Linear, Module, Tensor

TASKS = ("diagnosis", "change")


def expert_groups(num_experts: int, num_shared: int) -> tuple[tuple[int, ...], ...]:
    """Per-class expert index groups, ordered NC, MCI, AD."""
    per_class = (num_experts - num_shared) // len(DIAG_NAMES)
    return tuple(
        tuple(range(num_shared + k * per_class, num_shared + (k + 1) * per_class))
        for k in range(len(DIAG_NAMES)))


def label_guided_weights(labels: np.ndarray, num_experts: int, num_shared: int,
                         shared_weight: float, dtype) -> np.ndarray:
    """Fixed routing for masked pretraining: shared experts split
    ``shared_weight`` evenly, the sample's class pair splits the rest,
    all other experts get exactly zero."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= len(DIAG_NAMES)):
        raise ContractError(f"diagnosis labels must lie in 0..{len(DIAG_NAMES) - 1}")
    groups = expert_groups(num_experts, num_shared)
    w = np.zeros((labels.size, num_experts), dtype=dtype)
    w[:, :num_shared] = shared_weight / num_shared
    group_arr = np.asarray(groups)  # (classes, per_class)
    rows = np.arange(labels.size)[:, None]
    w[rows, group_arr[labels]] = (1.0 - shared_weight) / group_arr.shape[1]
    return w


def class_only_weights(klass: int, num_experts: int, num_shared: int, dtype) -> np.ndarray:
    """Routing for the specialization objective: the class's experts split
    the full weight, shared experts excluded."""
    groups = expert_groups(num_experts, num_shared)
    if not 0 <= klass < len(groups):
        raise ContractError(f"class index {klass} out of range")
    w = np.zeros(num_experts, dtype=dtype)
    w[list(groups[klass])] = 1.0 / len(groups[klass])
    return w


@dataclass
class Routing:
    """How an MMoE layer combines its experts for the current pass.

    ``sink`` is an optional list; in task mode every layer appends its
    (B, E) gate weights to it, in encounter order, for inspection.
    """

    kind: str  # "task" or "fixed"
    task: str | None = None
    weights: np.ndarray | None = None  # (B, E) or (E,), rows on the simplex
    sink: list | None = None


def task_routing(task: str) -> Routing:
    if task not in TASKS:
        raise ContractError(f"task must be one of {TASKS}, got {task!r}")
    return Routing(kind="task", task=task)


def fixed_routing(weights: np.ndarray) -> Routing:
    return Routing(kind="fixed", weights=np.asarray(weights))


class ExpertMLP(Module):
    """Two-layer GELU MLP, the unit every expert in a bank is made of."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, dtype):
        self.fc1 = Linear(rng, dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.gelu(self.fc1(x)))


class MMoELayer(Module):
    """Expert bank plus the dual task gates.

    Gate path: tokens are mean-pooled, reweighted by a sigmoid
    feature-level attention (shared between tasks), then each task's
    bias-free linear map produces expert logits that are divided by the
    gate temperature before the softmax.
    """

    def __init__(self, rng: np.random.Generator, dim: int, num_experts: int,
                 num_shared: int, hidden_ratio: int, gate_temp: float, dtype):
        self.experts = [ExpertMLP(rng, dim, hidden_ratio * dim, dtype)
                        for _ in range(num_experts)]
        self.feature_attn = Linear(rng, dim, dim, dtype)
        self.gate_diagnosis = Linear(rng, dim, num_experts, dtype, bias=False)
        self.gate_change = Linear(rng, dim, num_experts, dtype, bias=False)
        self.num_experts = num_experts
        self.num_shared = num_shared
        self.gate_temp = float(gate_temp)

    def _gate_linear(self, task: str) -> Linear:
        if task == "diagnosis":
            return self.gate_diagnosis
        if task == "change":
            return self.gate_change
        raise ContractError(f"task must be one of {TASKS}, got {task!r}")

    def feature_summary(self, x: Tensor) -> Tensor:
        """sigmoid(W_a x_bar + b_a) ⊙ x_bar for token mean x_bar."""
        xbar = x.mean(axis=1)
        return nm.mul(nm.sigmoid(self.feature_attn(xbar)), xbar)

    def gate_weights(self, x: Tensor, task: str) -> Tensor:
        logits = self._gate_linear(task)(self.feature_summary(x))
        return nm.softmax(nm.div(logits, self.gate_temp), axis=-1)

    def gate_parameters(self) -> dict[str, Tensor]:
        out = dict(self.feature_attn.named_parameters(prefix="feature_attn."))
        out.update(self.gate_diagnosis.named_parameters(prefix="gate_diagnosis."))
        out.update(self.gate_change.named_parameters(prefix="gate_change."))
        return out

    def __call__(self, x: Tensor, routing: Routing) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"MMoE expects (batch, tokens, channels), got {x.shape}")
        batch = x.shape[0]
        if routing.kind == "task":
            w = self.gate_weights(x, routing.task)
            if routing.sink is not None:
                routing.sink.append(w.data.copy())
            out = None
            for e in range(self.num_experts):
                we = nm.reshape(w[:, e], (batch, 1, 1))
                term = nm.mul(self.experts[e](x), we)
                out = term if out is None else nm.add(out, term)
            return out
        if routing.kind != "fixed":
            raise ContractError(f"unknown routing kind {routing.kind!r}")
        weights = np.asarray(routing.weights, dtype=x.dtype)
        if weights.ndim == 1:
            weights = np.broadcast_to(weights, (batch, weights.size))
        if weights.shape != (batch, self.num_experts):
            raise ShapeError(
                f"routing weights shape {weights.shape} does not match "
                f"(batch={batch}, experts={self.num_experts})")
        out = None
        for e in range(self.num_experts):
            col = weights[:, e]
            if not np.any(col):
                continue  # skipped experts stay out of the graph entirely
            term = nm.mul(self.experts[e](x), col.reshape(batch, 1, 1))
            out = term if out is None else nm.add(out, term)
        if out is None:
            raise ContractError("routing weights are all zero; no expert selected")
        return out
