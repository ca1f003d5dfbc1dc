"""Training objective: masked next-token loss plus the load-balancing term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossReport:
    regressive: Tensor
    aux_per_layer: list[Tensor]
    total: Tensor
    alpha: float

    def scalars(self) -> dict:
        return {
            "total": self.total.item(),
            "regressive": self.regressive.item(),
            "aux": [a.item() for a in self.aux_per_layer],
        }


def autoregressive_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean NLL of ``targets[:, t+1]`` under ``logits[:, t]`` where ``loss_mask[:, t+1]``.

    ``logits`` is (B, T, V); ``targets`` and ``loss_mask`` are (B, T) aligned
    with the sequence, so position 0 is never a target.
    """
    mask = np.asarray(loss_mask, dtype=bool)[:, 1:]
    if not mask.any():
        raise ValueError("loss mask selects no positions")
    b_idx, t_idx = np.nonzero(mask)
    tgt = np.asarray(targets)[:, 1:][b_idx, t_idx]
    picked = ad.take(logits, (b_idx, t_idx))  # (M, V) rows predicting t+1
    logp = ad.log_softmax(picked, axis=-1)
    nll = ad.take(logp, (np.arange(len(tgt)), tgt))
    return -ad.mean(nll)


def aux_loss(probs: Tensor, selections: np.ndarray | None = None, count_all_k: bool = False) -> Tensor:
    """Load-balancing loss ``E * sum_i F_i * G_i`` for one MoE layer.

    ``F_i`` is the fraction of tokens whose top-1 expert is ``i`` (a constant
    for differentiation); ``G_i`` the mean routing probability.  ``selections``
    defaults to the argmax of ``probs``; with ``count_all_k`` a (K, k) selection
    counts every assignment, scaled by 1/k.
    """
    K, E = probs.shape
    if K == 0:
        raise ValueError("aux_loss needs at least one token")
    if selections is None:
        selections = np.argmax(probs.values, axis=1)
    sel = np.asarray(selections)
    if sel.ndim == 2:
        sel = sel if count_all_k else sel[:, 0]
    k = sel.shape[1] if sel.ndim == 2 else 1
    frac = np.bincount(sel.ravel(), minlength=E) / (K * k)
    mean_prob = ad.mean(probs, axis=0)
    return ad.sum_(mean_prob * frac) * float(E)


def total_loss(regressive: Tensor, aux_list: list[Tensor], alpha: float) -> LossReport:
    """regressive + alpha * mean(aux over MoE layers)."""
    if aux_list and alpha != 0.0:
        aux_mean = aux_list[0]
        for a in aux_list[1:]:
            aux_mean = aux_mean + a
        total = regressive + aux_mean * (alpha / len(aux_list))
    else:
        total = regressive
    return LossReport(regressive, list(aux_list), total, alpha)
