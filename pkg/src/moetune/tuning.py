"""Three-stage tuning: projector alignment, dense tuning, sparse MoE tuning."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analytics import RoutingTrace, drop_rate, expert_load_distribution, max_load_fraction
from .data import SyntheticDataset, sequence_targets
from .model import ConfigError, ModelConfig, ToyModel, TokenBatch, build, moe_layer_indices
from .moe import init_from_ffn
from .objectives import LossReport, autoregressive_loss, aux_loss, total_loss

STAGES = ("I", "II", "III")
SUBSETS = ("moe", "ffn", "all")


@dataclass
class StageSpec:
    stage: str
    steps: int
    learning_rate: float
    schedule: str = "cosine"
    tuned_subset: str = "moe"
    batch_size: int = 32
    alpha: float | None = None  # None: use the model config's alpha

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        if self.tuned_subset not in SUBSETS:
            raise ConfigError(f"tuned_subset must be one of {SUBSETS}")
        if self.steps < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("steps, learning_rate and batch_size must be positive")

    def trainable_groups(self) -> set[str]:
        if self.stage == "I":
            return {"projector"}
        if self.stage == "II" or self.tuned_subset == "all":
            return {"projector", "embedding", "attention", "ffn", "moe", "head"}
        if self.tuned_subset == "ffn":
            return {"ffn", "moe"}
        return {"moe"}


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


@dataclass
class Adam:
    """Adam moments for a fixed parameter list; weight decay is zero."""

    params: list[ad.Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p.values)):
                raise ad.NonFiniteError("parameter became non-finite")

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


def compute_loss(model: ToyModel, batch: TokenBatch, alpha: float, use_capacity: bool = True, trace_sink=None):
    logits = model.forward(batch, trace_sink=trace_sink, use_capacity=use_capacity)
    targets, mask = sequence_targets(batch)
    reg = autoregressive_loss(logits, targets, mask)
    aux = [aux_loss(r.probs, r.decision.selected) for r in model.aux_cache]
    return total_loss(reg, aux, alpha)


def evaluate(model: ToyModel, batch: TokenBatch, use_capacity: bool = False) -> dict:
    """Losses and routing statistics on ``batch`` without touching gradients."""
    trace = [] if model.is_sparse else None
    report = compute_loss(model, batch, model.config.alpha, use_capacity, trace)
    model.aux_cache = []
    out = report.scalars()
    if trace:
        rt = RoutingTrace(trace)
        out["max_load"] = max_load_fraction(rt)
        out["loads"] = expert_load_distribution(rt).tolist()
        out["drop_rate"] = drop_rate(rt)
    return out


def _snapshot(model: ToyModel, groups: set[str] | None = None) -> dict[str, np.ndarray]:
    return {name: p.values.copy() for g, name, p in model.named_parameters() if groups is None or g in groups}


def run_stage(
    model: ToyModel,
    spec: StageSpec,
    dataset: SyntheticDataset,
    seed: int,
    metrics_sink=None,
    log_every: int = 1,
) -> tuple[ToyModel, list[dict]]:
    """Train ``model`` in place for one stage; returns it and the per-step metrics.

    Parameters outside the stage's trainable groups never reach the optimizer,
    so their buffers stay bitwise unchanged.
    """
    if spec.stage == "III" and not model.is_sparse:
        raise ConfigError("stage III needs a sparse model; expand the dense model first")
    groups = spec.trainable_groups()
    params = model.parameters(groups)
    opt = Adam(params)
    frozen = [p for g, _, p in model.named_parameters() if g not in groups]
    for p in frozen:
        p.requires_grad = False
    try:
        timeline = _train(model, spec, dataset, seed, opt, metrics_sink, log_every)
    finally:
        for p in frozen:
            p.requires_grad = True
    return model, timeline


def _train(model, spec, dataset, seed, opt, metrics_sink, log_every):
    alpha = model.config.alpha if spec.alpha is None else spec.alpha
    stream = dataset.batches(spec.batch_size, seed)
    timeline = []
    for step in range(spec.steps):
        batch = next(stream)
        report = compute_loss(model, batch, alpha)
        opt.zero_grad()
        report.total.backward()
        lr = cosine_lr(step, spec.steps, spec.learning_rate) if spec.schedule == "cosine" else spec.learning_rate
        opt.step(lr)
        if step % log_every == 0 or step == spec.steps - 1:
            rec = {"stage": spec.stage, "step": step, "lr": lr, **report.scalars()}
            if model.is_sparse:
                loads = []
                for r in model.aux_cache:
                    counts = np.bincount(r.decision.selected[:, 0], minlength=r.probs.shape[1])
                    loads.append((counts / counts.sum()).tolist())
                rec["loads"] = loads
                rec["drop_rate"] = float(np.mean([1.0 - r.decision.kept.mean() for r in model.aux_cache]))
            timeline.append(rec)
            if metrics_sink is not None:
                metrics_sink(rec)
    opt.zero_grad()
    model.aux_cache = []
    return timeline


def expand_to_moe(
    dense_model: ToyModel,
    num_experts: int | None = None,
    top_k: int | None = None,
    capacity_factor: float | None = None,
) -> ToyModel:
    """Copy of ``dense_model`` whose placement-selected FFNs become expert ensembles.

    Every expert is a bitwise copy of the FFN it replaces; all other buffers
    are copied verbatim.
    """
    cfg = dense_model.config
    if cfg.placement == "Dense":
        raise ConfigError("Dense placement has no MoE layers to expand")
    if dense_model.is_sparse:
        raise ConfigError("model is already sparse")
    changes = {}
    if num_experts is not None:
        changes["experts"] = num_experts
    if top_k is not None:
        changes["top_k"] = top_k
    if capacity_factor is not None:
        changes["capacity_factor"] = capacity_factor
    new_cfg = cfg.replace(**changes) if changes else cfg
    dense_model.aux_cache = []
    model = copy.deepcopy(dense_model)
    model.config = new_cfg
    rng = np.random.default_rng(0)
    for i in moe_layer_indices(new_cfg.layers, new_cfg.placement):
        b = model.blocks[i]
        b.moe = init_from_ffn(
            b.ffn,
            new_cfg.experts,
            new_cfg.top_k,
            new_cfg.capacity_factor,
            new_cfg.router_init,
            rng,
            new_cfg.renormalize_gates,
        )
        b.ffn = None
    return model


@dataclass
class PipelineSpec:
    """Step counts and learning rates for the three stages."""

    stage1: StageSpec = field(default_factory=lambda: StageSpec("I", 100, 3e-3))
    stage2: StageSpec = field(default_factory=lambda: StageSpec("II", 150, 1e-3))
    stage3: StageSpec = field(default_factory=lambda: StageSpec("III", 500, 3e-3))

    def by_stage(self, stage: str) -> StageSpec:
        return {"I": self.stage1, "II": self.stage2, "III": self.stage3}[stage]


def run_pipeline(
    config: ModelConfig,
    dataset: SyntheticDataset,
    seed: int,
    pipeline: PipelineSpec | None = None,
    stages=STAGES,
    model: ToyModel | None = None,
    metrics_sink=None,
    on_stage_end=None,
) -> tuple[ToyModel, dict[str, list[dict]]]:
    """Run ``stages`` in order from a fresh dense model (or ``model``)."""
    pipeline = pipeline or PipelineSpec()
    if model is None:
        model = build(config, seed, dense=True)
    timelines = {}
    for stage in stages:
        spec = pipeline.by_stage(stage)
        if stage == "III" and not model.is_sparse:
            model = expand_to_moe(model)
        t0 = time.perf_counter()
        model, tl = run_stage(model, spec, dataset, seed + STAGES.index(stage), metrics_sink)
        timelines[stage] = tl
        if on_stage_end is not None:
            on_stage_end(stage, model, time.perf_counter() - t0)
    return model, timelines
