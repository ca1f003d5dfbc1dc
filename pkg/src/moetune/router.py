"""Soft top-k router with capacity-limited Batch Priority Routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, softmax


@dataclass
class RouterState:
    """Gating matrix of shape (D, E) plus routing hyper-parameters."""

    weight: Tensor
    top_k: int
    capacity_factor: float = 1.5
    renormalize: bool = False

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError("router weight must be (D, E)")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {self.num_experts}]")
        if not self.capacity_factor > 0:
            raise ValueError("capacity_factor must be positive")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[1]

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class RoutingDecision:
    """Routing of K tokens: probabilities (K, E), selection and kept flags (K, k)."""

    probs: np.ndarray
    selected: np.ndarray
    gates: np.ndarray
    kept: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kept is None:
            self.kept = np.ones(self.selected.shape, dtype=bool)

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    def drop_rate(self) -> float:
        return 1.0 - float(self.kept.mean()) if self.kept.size else 0.0


def route_probabilities(x: Tensor, state: RouterState) -> Tensor:
    """softmax(x W) per token; ``x`` is (K, D)."""
    if x.shape[-1] != state.dim:
        raise ValueError(f"token width {x.shape[-1]} != router width {state.dim}")
    return softmax(matmul(x, state.weight), axis=-1)


def select_top_k(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (K, k) of the k largest probabilities and the raw gate values.

    Ties go to the lower expert index: a stable sort on the negated values keeps
    the original order among equal entries.
    """
    probs = np.asarray(probs)
    if not 1 <= k <= probs.shape[-1]:
        raise ValueError(f"k={k} outside [1, {probs.shape[-1]}]")
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(probs, order, axis=-1)


def expert_capacity(num_tokens: int, num_experts: int, top_k: int, capacity_factor: float) -> int:
    return max(1, math.floor(capacity_factor * top_k * num_tokens / num_experts))


def apply_capacity(decision: RoutingDecision, capacity_factor: float) -> RoutingDecision:
    """Batch Priority Routing over one batch of K tokens.

    Every expert keeps its ``floor(c * k * K / E)`` highest-gate assignments
    (ties to the lower token index); the rest are marked dropped.
    """
    K, k = decision.selected.shape
    E = decision.probs.shape[1]
    cap = expert_capacity(K, E, k, capacity_factor)
    kept = np.zeros((K, k), dtype=bool)
    flat_expert = decision.selected.ravel()
    flat_gate = decision.gates.ravel()
    flat_token = np.repeat(np.arange(K), k)
    # primary key gate descending, secondary token ascending
    order = np.lexsort((flat_token, -flat_gate))
    experts_in_order = flat_expert[order]
    onehot = experts_in_order[:, None] == np.arange(E)
    rank = np.cumsum(onehot, axis=0)[np.arange(order.size), experts_in_order] - 1
    kept.reshape(-1)[order] = rank < cap
    return RoutingDecision(decision.probs, decision.selected, decision.gates, kept)


def route(x: Tensor, state: RouterState, use_capacity: bool = True) -> tuple[Tensor, RoutingDecision]:
    """Probabilities (differentiable) and the discrete routing decision."""
    probs = route_probabilities(x, state)
    selected, gates = select_top_k(probs.values, state.top_k)
    decision = RoutingDecision(probs.values, selected, gates)
    if use_capacity:
        decision = apply_capacity(decision, state.capacity_factor)
    return probs, decision
