"""Sparse mixture-of-experts tuning on a desk-scale vision-language decoder."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward
from .model import ModelConfig, TokenBatch, ToyModel, build, count_parameters, forward
from .moe import ExpertEnsemble, FFNParams, init_from_ffn, moe_forward
from .objectives import LossReport, autoregressive_loss, aux_loss, total_loss
from .router import RouterState, RoutingDecision, apply_capacity, route_probabilities, select_top_k
from .tuning import StageSpec, cosine_lr, expand_to_moe, run_pipeline, run_stage

__all__ = [
    "Tensor",
    "backward",
    "ModelConfig",
    "TokenBatch",
    "ToyModel",
    "build",
    "count_parameters",
    "forward",
    "ExpertEnsemble",
    "FFNParams",
    "init_from_ffn",
    "moe_forward",
    "LossReport",
    "autoregressive_loss",
    "aux_loss",
    "total_loss",
    "RouterState",
    "RoutingDecision",
    "apply_capacity",
    "route_probabilities",
    "select_top_k",
    "StageSpec",
    "cosine_lr",
    "expand_to_moe",
    "run_pipeline",
    "run_stage",
]
