"""Toy vision-language decoder with optional sparse MoE blocks.

Image pseudo-tokens pass through a frozen random encoder and a two-layer GELU
projector; text tokens through a word embedding.  The concatenated sequence
runs through pre-norm blocks ``x' = x + MSA(LN(x))``, ``x = x' + FFN/MoE(LN(x'))``
and a final gain-only LayerNorm before an untied output head.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .analytics import LayerTrace
from .moe import ExpertEnsemble, FFNParams, init_from_ffn, moe_forward, normalize

PLACEMENTS = ("Interval", "FirstHalf", "SecondHalf", "All", "Dense")

# parameter groups; "encoder" is a frozen constant in every stage
GROUPS = ("encoder", "projector", "embedding", "attention", "ffn", "moe", "head")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture of one model.  Names follow the architecture tables."""

    embedding_size: int = 256
    width: int = 64
    layers: int = 4
    ffn_size: int = 128
    ffn_factor: int = 2
    heads: int = 4
    experts: int = 4
    top_k: int = 2
    moe_layers: int | None = None
    placement: str = "Interval"
    capacity_factor: float = 1.5
    pseudo_image_tokens: int = 16
    alpha: float = 0.01
    image_feature_dim: int = 32
    vision_dim: int = 48
    max_seq_len: int = 64
    renormalize_gates: bool = False
    router_init: str | float = "zeros"
    kv_width: int | None = None
    name: str = "toy"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        expected = len(moe_layer_indices(self.layers, self.placement))
        if self.moe_layers is None:
            self.moe_layers = expected
        elif self.moe_layers != expected:
            raise ConfigError(
                f"moe_layers={self.moe_layers} inconsistent with placement {self.placement} "
                f"over {self.layers} layers (expected {expected})"
            )
        if self.width % self.heads:
            raise ConfigError("heads must divide width")
        if self.ffn_factor not in (2, 3):
            raise ConfigError("ffn_factor must be 2 or 3")
        if not 1 <= self.top_k <= self.experts:
            raise ConfigError("top_k must lie in [1, experts]")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive")
        if self.pseudo_image_tokens < 0 or self.layers < 1:
            raise ConfigError("invalid sequence/depth settings")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        if ("placement" in changes or "layers" in changes) and "moe_layers" not in changes:
            d["moe_layers"] = None
        return ModelConfig.from_dict(d)


def moe_layer_indices(layers: int, placement: str) -> list[int]:
    """Blocks that hold an expert ensemble; Interval uses the odd indices."""
    half = layers // 2
    return {
        "Interval": list(range(1, layers, 2)),
        "FirstHalf": list(range(0, half)),
        "SecondHalf": list(range(half, layers)),
        "All": list(range(layers)),
        "Dense": [],
    }[placement]


def count_parameters(config: ModelConfig) -> tuple[int, int]:
    """(activated, total) language-model parameters.

    total = emb*w + L*(attn + w*ffn*f + 2w) + w + w*emb
            + M*(E-1)*(w*ffn*f + 2w) + M*w*E
    with attn = 4w^2, or 2w^2 + 2*w*kv_width when keys/values are narrower.
    The activated count substitutes top-k for E.
    """
    w, emb, f = config.width, config.embedding_size, config.ffn_factor
    attn = 4 * w * w if config.kv_width is None else 2 * w * w + 2 * w * config.kv_width
    unit = w * config.ffn_size * f + 2 * w
    base = emb * w + config.layers * (attn + unit) + w + w * emb
    m = config.moe_layers

    def with_experts(n):
        return base + m * (n - 1) * unit + m * w * n

    if m == 0:
        return base, base
    return with_experts(config.top_k), with_experts(config.experts)


@dataclass
class TokenBatch:
    """``P`` pseudo-image feature vectors followed by ``N`` text tokens per sample."""

    image: np.ndarray  # (B, P, C)
    text: np.ndarray  # (B, N) int
    loss_mask: np.ndarray  # (B, N) bool, true on answer tokens
    labels: np.ndarray | None = None  # (B,) image class, for bookkeeping only

    @property
    def batch_size(self) -> int:
        return self.text.shape[0]

    @property
    def seq_len(self) -> int:
        return self.image.shape[1] + self.text.shape[1]

    def modality(self) -> np.ndarray:
        """(B, P+N) tags: 1 for image positions, 0 for text."""
        P, N = self.image.shape[1], self.text.shape[1]
        row = np.concatenate([np.ones(P, dtype=np.int8), np.zeros(N, dtype=np.int8)])
        return np.broadcast_to(row, (self.batch_size, P + N))

    def subset(self, idx) -> "TokenBatch":
        return TokenBatch(
            self.image[idx],
            self.text[idx],
            self.loss_mask[idx],
            None if self.labels is None else self.labels[idx],
        )


@dataclass
class Block:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn: FFNParams | None = None
    moe: ExpertEnsemble | None = None

    @property
    def is_moe(self) -> bool:
        return self.moe is not None


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


@dataclass
class ToyModel:
    config: ModelConfig
    encoder: np.ndarray
    proj_w1: Tensor
    proj_b1: Tensor
    proj_w2: Tensor
    proj_b2: Tensor
    embedding: Tensor
    positions: Tensor
    blocks: list[Block]
    final_gain: Tensor
    head: Tensor
    aux_cache: list = field(default_factory=list, repr=False)

    @property
    def moe_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.is_moe]

    @property
    def is_sparse(self) -> bool:
        return bool(self.moe_blocks)

    def named_parameters(self) -> Iterator[tuple[str, str, Tensor]]:
        """Yield (group, name, tensor) for every trainable buffer."""
        yield "projector", "projector.w1", self.proj_w1
        yield "projector", "projector.b1", self.proj_b1
        yield "projector", "projector.w2", self.proj_w2
        yield "projector", "projector.b2", self.proj_b2
        yield "embedding", "embedding", self.embedding
        yield "embedding", "positions", self.positions
        for i, b in enumerate(self.blocks):
            for nm in ("wq", "wk", "wv", "wo"):
                yield "attention", f"blocks.{i}.attn.{nm}", getattr(b, nm)
            if b.is_moe:
                for nm, p in b.moe.named_parameters(f"blocks.{i}.moe."):
                    yield "moe", nm, p
            else:
                for nm, p in b.ffn.named_parameters(f"blocks.{i}.ffn."):
                    yield "ffn", nm, p
        yield "head", "final_norm.gain", self.final_gain
        yield "head", "head", self.head

    def parameters(self, groups=None) -> list[Tensor]:
        return [p for g, _, p in self.named_parameters() if groups is None or g in groups]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"encoder": self.encoder}
        out.update({name: p.values for _, name, p in self.named_parameters()})
        return out

    def forward(self, batch: TokenBatch, trace_sink=None, use_capacity: bool = True) -> Tensor:
        return forward(self, batch, trace_sink, use_capacity)

    __call__ = forward


def build(config: ModelConfig, seed: int, dense: bool = False) -> ToyModel:
    """Fresh model; ``dense=True`` gives every block a plain FFN (stages I/II)."""
    rng = np.random.default_rng(seed)
    D, V = config.width, config.embedding_size
    std = D**-0.5

    encoder = rng.normal(0.0, config.image_feature_dim**-0.5, (config.image_feature_dim, config.vision_dim))
    proj_w1 = _param(rng.normal(0.0, config.vision_dim**-0.5, (config.vision_dim, D)))
    proj_b1 = _param(np.zeros(D))
    proj_w2 = _param(rng.normal(0.0, std, (D, D)))
    proj_b2 = _param(np.zeros(D))
    embedding = _param(rng.normal(0.0, 1.0, (V, D)) * 0.5)
    positions = _param(rng.normal(0.0, 0.1, (config.max_seq_len, D)))

    moe_at = set() if dense else set(moe_layer_indices(config.layers, config.placement))
    blocks = []
    for i in range(config.layers):
        wq, wk, wv = (_param(rng.normal(0.0, std, (D, D))) for _ in range(3))
        wo = _param(rng.normal(0.0, std / math.sqrt(2 * config.layers), (D, D)))
        ffn = FFNParams.init(D, config.ffn_size, config.ffn_factor, rng)
        ffn.w_out.values *= 1.0 / math.sqrt(2 * config.layers)
        block = Block(wq, wk, wv, wo, ffn=ffn)
        if i in moe_at:
            block = Block(wq, wk, wv, wo, moe=init_from_ffn(
                ffn, config.experts, config.top_k, config.capacity_factor,
                config.router_init, rng, config.renormalize_gates,
            ))
            # independent experts when building sparse from scratch
            for e in block.moe.experts[1:]:
                fresh = FFNParams.init(D, config.ffn_size, config.ffn_factor, rng)
                fresh.w_out.values *= 1.0 / math.sqrt(2 * config.layers)
                for nm, p in fresh.named_parameters():
                    setattr(e, nm, p)
        blocks.append(block)

    return ToyModel(
        config=config,
        encoder=encoder,
        proj_w1=proj_w1,
        proj_b1=proj_b1,
        proj_w2=proj_w2,
        proj_b2=proj_b2,
        embedding=embedding,
        positions=positions,
        blocks=blocks,
        final_gain=_param(np.ones(D)),
        head=_param(rng.normal(0.0, std, (D, V))),
    )


def _attention(x: Tensor, b: Block, heads: int, causal: np.ndarray) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(x @ b.wq), split(x @ b.wk), split(x @ b.wv)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = ad.softmax(ad.where_const(causal, scores, -1e30), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    return ctx @ b.wo


def embed(model: ToyModel, batch: TokenBatch) -> Tensor:
    cfg = model.config
    B, P, _ = batch.image.shape
    N = batch.text.shape[1]
    T = P + N
    if T == 0:
        raise ValueError("empty sequence")
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    parts = []
    if P:
        z = Tensor(batch.image @ model.encoder)
        v = ad.gelu(z @ model.proj_w1 + model.proj_b1) @ model.proj_w2 + model.proj_b2
        parts.append(v)
    if N:
        parts.append(ad.take(model.embedding, batch.text))
    x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return x + ad.take(model.positions, slice(0, T))


def forward(model: ToyModel, batch: TokenBatch, trace_sink=None, use_capacity: bool = True) -> Tensor:
    """Logits of shape (B, P+N, vocab).

    Router probabilities and decisions of every MoE block are left in
    ``model.aux_cache`` for the auxiliary loss.  When ``trace_sink`` is a list,
    one :class:`~moetune.analytics.LayerTrace` per MoE block is appended.
    """
    cfg = model.config
    x = embed(model, batch)
    B, T, D = x.shape
    causal = np.tril(np.ones((T, T), dtype=bool))
    model.aux_cache = []
    modality = batch.modality().reshape(-1)
    position = np.broadcast_to(np.arange(T), (B, T)).reshape(-1)
    for i, b in enumerate(model.blocks):
        x = x + _attention(normalize(x), b, cfg.heads, causal)
        z = ad.reshape(normalize(x), (B * T, D))
        if b.is_moe:
            res = moe_forward(z, b.moe, use_capacity=use_capacity, layer=i)
            model.aux_cache.append(res)
            y = res.output
            if trace_sink is not None:
                d = res.decision
                trace_sink.append(LayerTrace(i, d.probs, d.selected, d.kept, modality, position))
        else:
            y = b.ffn(z)
        x = x + ad.reshape(y, (B, T, D))
    h = ad.layer_norm(x, model.final_gain)
    return h @ model.head


def buffer_walk(model: ToyModel) -> tuple[int, int]:
    """(activated, total) by summing buffer sizes of the language-model groups.

    Counts the token embedding, attention, FFN/expert units, routers, final
    norm and head; the projector, encoder stub and positional table sit
    outside the language model.  Activated keeps only ``top_k`` experts and,
    mirroring the closed form, ``top_k`` router columns.
    """
    total = active = 0
    for group, name, p in model.named_parameters():
        if group in ("projector", "encoder") or name == "positions":
            continue
        total += p.values.size
        if name.endswith(".moe.router"):
            active += p.shape[0] * model.blocks[int(name.split(".")[1])].moe.top_k
            continue
        if ".experts." in name:
            idx = int(name.split(".experts.")[1].split(".")[0])
            block = model.blocks[int(name.split(".")[1])]
            if idx >= block.moe.top_k:
                continue
        active += p.values.size
    return active, total
