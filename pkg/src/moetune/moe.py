"""Feed-forward units, expert ensembles and the sparse MoE forward pass."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, gelu, index_add, layer_norm, matmul, mul, power, sum_, take
from .router import RouterState, RoutingDecision, route


@dataclass
class FFNParams:
    """One feed-forward unit: input affine, then ``ffn_factor`` linear maps.

    The unit receives an already normalised token and owns the affine half of
    its pre-norm, so replicating the unit replicates ``2 * width`` parameters
    alongside the ``width * ffn * ffn_factor`` matrix entries.

    ``ffn_factor == 2``: ``gelu(h @ w_in) @ w_out``.
    ``ffn_factor == 3``: ``(gelu(h @ w_gate) * (h @ w_in)) @ w_out``.
    """

    norm_gain: Tensor
    norm_bias: Tensor
    w_in: Tensor
    w_out: Tensor
    w_gate: Tensor | None = None

    @classmethod
    def init(cls, width: int, hidden: int, ffn_factor: int, rng: np.random.Generator) -> "FFNParams":
        if ffn_factor not in (2, 3):
            raise ValueError("ffn_factor must be 2 or 3")

        def lin(n_in, n_out):
            return Tensor(rng.normal(0.0, n_in**-0.5, (n_in, n_out)), requires_grad=True)

        return cls(
            norm_gain=Tensor(np.ones(width), requires_grad=True),
            norm_bias=Tensor(np.zeros(width), requires_grad=True),
            w_in=lin(width, hidden),
            w_out=lin(hidden, width),
            w_gate=lin(width, hidden) if ffn_factor == 3 else None,
        )

    @property
    def ffn_factor(self) -> int:
        return 2 if self.w_gate is None else 3

    @property
    def width(self) -> int:
        return self.w_in.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_in.shape[1]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [
            (prefix + "norm_gain", self.norm_gain),
            (prefix + "norm_bias", self.norm_bias),
            (prefix + "w_in", self.w_in),
            (prefix + "w_out", self.w_out),
        ]
        if self.w_gate is not None:
            out.append((prefix + "w_gate", self.w_gate))
        return out

    def macs_per_token(self) -> int:
        return self.width * self.hidden * self.ffn_factor

    def __call__(self, z: Tensor) -> Tensor:
        h = z * self.norm_gain + self.norm_bias
        if self.w_gate is None:
            inner = gelu(matmul(h, self.w_in))
        else:
            inner = mul(gelu(matmul(h, self.w_gate)), matmul(h, self.w_in))
        return matmul(inner, self.w_out)


def normalize(x: Tensor) -> Tensor:
    """Parameter-free pre-norm shared by attention, FFN and router inputs."""
    return layer_norm(x)


@dataclass
class ExpertEnsemble:
    experts: list[FFNParams]
    router: RouterState

    def __post_init__(self):
        if len(self.experts) != self.router.num_experts:
            raise ValueError("expert count differs from router width")
        shapes = {tuple(p.shape for _, p in e.named_parameters()) for e in self.experts}
        if len(shapes) != 1:
            raise ValueError("experts must share identical shapes")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def top_k(self) -> int:
        return self.router.top_k

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + "router", self.router.weight)]
        for i, e in enumerate(self.experts):
            out.extend(e.named_parameters(f"{prefix}experts.{i}."))
        return out


def init_from_ffn(
    ffn: FFNParams,
    num_experts: int,
    top_k: int,
    capacity_factor: float = 1.5,
    router_init: str | float = "zeros",
    rng: np.random.Generator | None = None,
    renormalize: bool = False,
) -> ExpertEnsemble:
    """Replicate ``ffn`` into ``num_experts`` bitwise-equal experts.

    ``router_init`` is ``"zeros"`` (uniform initial gates) or a standard
    deviation for a normal draw from ``rng``.
    """
    if num_experts < 1:
        raise ValueError("need at least one expert")
    experts = []
    for _ in range(num_experts):
        clone = copy.copy(ffn)
        for name, p in ffn.named_parameters():
            setattr(clone, name, Tensor(p.values.copy(), requires_grad=True))
        experts.append(clone)
    if router_init == "zeros":
        w = np.zeros((ffn.width, num_experts))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, float(router_init), (ffn.width, num_experts))
    state = RouterState(Tensor(w, requires_grad=True), top_k, capacity_factor, renormalize)
    return ExpertEnsemble(experts, state)


class MoEOutput(NamedTuple):
    output: Tensor
    probs: Tensor
    decision: RoutingDecision
    macs: int


def moe_forward(
    x: Tensor,
    ensemble: ExpertEnsemble,
    trace_sink: list | None = None,
    use_capacity: bool = True,
    layer: int | None = None,
) -> MoEOutput:
    """Sparse MoE on tokens ``x`` of shape (K, D).

    Each kept (token, expert) assignment adds ``P(x)_e * expert_e(x)``; dropped
    assignments add nothing.  Experts are summed in ascending index order.
    """
    K, D = x.shape
    probs, decision = route(x, ensemble.router, use_capacity)
    coef_src = probs
    if ensemble.router.renormalize:
        picked = take(probs, (np.arange(K)[:, None], decision.selected))
        coef_src = probs * power(sum_(picked, axis=1, keepdims=True), -1.0)
    out = None
    macs = 0
    for e, expert in enumerate(ensemble.experts):
        rows = np.nonzero(((decision.selected == e) & decision.kept).any(axis=1))[0]
        if rows.size == 0:
            continue
        y = expert(take(x, rows))
        coef = take(coef_src, (rows, np.full(rows.size, e)))
        contrib = index_add((K, D), rows, mul(y, coef.reshape(rows.size, 1)))
        out = contrib if out is None else out + contrib
        macs += rows.size * expert.macs_per_token()
    if out is None:
        out = Tensor(np.zeros((K, D)))
    if trace_sink is not None:
        trace_sink.append({"layer": layer, "decision": decision})
    return MoEOutput(out, probs, decision, macs)
