"""Decoder-only micro-transformer with PEFT injection sites.

Pre-norm blocks: ``a = rmsnorm(h)``; ``Q, K, V = a W + delta``; causal
multi-head attention; residual; ``m = rmsnorm(h1)``; ``y = silu(m W1) W2``;
``h2 = h1 + y + mlp_delta``. The injection deltas come from a
:class:`DeltaProvider`, which is how the cloud node reaches the edge without
the backbone knowing anything about transport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .numeric import (
    InputError,
    Rng,
    ShapeError,
    add_flops,
    cross_entropy,
    dtype_for,
    matmul,
    rmsnorm,
    rmsnorm_backward,
    seeded_normal,
    silu,
    silu_backward,
    softmax_rows,
    softmax_rows_backward,
    transpose,
)

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 8
    max_seq: int = 32
    precision: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a multiple of n_heads")
        if self.d_ff < 1 or self.max_seq < 1:
            raise ValueError("d_ff and max_seq must be positive")
        dtype_for(self.precision)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self) -> np.dtype:
        return dtype_for(self.precision)


@dataclass
class DecoderBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray

    FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2", "g1", "g2")

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class Backbone:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list[DecoderBlock]
    final_gain: np.ndarray
    lm_head: np.ndarray
    positions: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig) -> "Backbone":
        """Seeded initialisation; draws happen in declaration order from one stream."""
        rng = Rng(config.seed)
        p, d, f = config.precision, config.d_model, config.d_ff

        def linear(fan_in: int, fan_out: int) -> np.ndarray:
            w = seeded_normal(rng, (fan_in, fan_out), p)
            return (w * (1.0 / math.sqrt(fan_in))).astype(config.dtype)

        embedding = (seeded_normal(rng, (config.vocab, d), p) * 0.5).astype(config.dtype)
        blocks = []
        for _ in range(config.n_layers):
            blocks.append(
                DecoderBlock(
                    wq=linear(d, d),
                    wk=linear(d, d),
                    wv=linear(d, d),
                    wo=linear(d, d),
                    w1=linear(d, f),
                    w2=linear(f, d),
                    g1=np.ones(d, dtype=config.dtype),
                    g2=np.ones(d, dtype=config.dtype),
                )
            )
        final_gain = np.ones(d, dtype=config.dtype)
        lm_head = linear(d, config.vocab)
        return cls(config, embedding, blocks, final_gain, lm_head, sinusoidal_positions(config))

    def tensors(self) -> list[np.ndarray]:
        """All tensors in checkpoint declaration order."""
        out = [self.embedding]
        for blk in self.blocks:
            out.extend(blk.tensors())
        out.extend([self.final_gain, self.lm_head, self.positions])
        return out

    def trainable(self) -> list[np.ndarray]:
        """Tensors updated by backbone pretraining (positions are fixed)."""
        return self.tensors()[:-1]

    def copy(self) -> "Backbone":
        return Backbone(
            self.config,
            self.embedding.copy(),
            [DecoderBlock(*(t.copy() for t in b.tensors())) for b in self.blocks],
            self.final_gain.copy(),
            self.lm_head.copy(),
            self.positions.copy(),
        )


def sinusoidal_positions(config: ModelConfig) -> np.ndarray:
    t = np.arange(config.max_seq, dtype=np.float64)[:, None]
    i = np.arange(0, config.d_model, 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, i / config.d_model)
    pos = np.zeros((config.max_seq, config.d_model))
    pos[:, 0::2] = np.sin(angle)
    pos[:, 1::2] = np.cos(angle[:, : config.d_model // 2])
    return pos.astype(config.dtype)


class DeltaProvider(Protocol):
    """Supplies PEFT deltas at the injection sites and absorbs their gradients.

    Forward hooks return ``None`` when no delta applies to the layer. Backward
    hooks return the branch's contribution to the site input's gradient, or
    ``None``.
    """

    def qkv_delta(self, layer: int, a: np.ndarray) -> Sequence[np.ndarray] | None: ...

    def mlp_delta(self, layer: int, y: np.ndarray) -> np.ndarray | None: ...

    def qkv_backward(
        self, layer: int, dq: np.ndarray, dk: np.ndarray, dv: np.ndarray
    ) -> np.ndarray | None: ...

    def mlp_backward(self, layer: int, dy: np.ndarray) -> np.ndarray | None: ...


class NoDelta:
    """The bare frozen backbone."""

    def qkv_delta(self, layer, a):
        return None

    def mlp_delta(self, layer, y):
        return None

    def qkv_backward(self, layer, dq, dk, dv):
        return None

    def mlp_backward(self, layer, dy):
        return None


# -- embedding ------------------------------------------------------------------

def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def embed(tokens, backbone: Backbone) -> np.ndarray:
    """``E[token_t] + position[t]``; returns ``[B, T, d]`` (``[T, d]`` for 1-D input)."""
    cfg = backbone.config
    arr = _as_batch(tokens)
    if arr.shape[1] > cfg.max_seq:
        raise InputError(f"sequence length {arr.shape[1]} exceeds max_seq {cfg.max_seq}")
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab):
        raise InputError(f"token id outside [0, {cfg.vocab})")
    add_flops(arr.size * cfg.d_model)
    out = backbone.embedding[arr] + backbone.positions[: arr.shape[1]]
    return out[0] if np.ndim(tokens) == 1 else out


# -- blocks ---------------------------------------------------------------------

def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


@dataclass
class BlockCache:
    h: np.ndarray
    a: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn: np.ndarray
    h1: np.ndarray
    m: np.ndarray
    u: np.ndarray
    z: np.ndarray


def forward_block(
    h: np.ndarray,
    block: DecoderBlock,
    n_heads: int,
    layer: int = 0,
    provider: DeltaProvider | None = None,
) -> tuple[np.ndarray, BlockCache]:
    """One decoder block on ``h`` of shape ``[B, T, d]``."""
    if h.ndim != 3 or h.shape[-1] != block.wq.shape[0]:
        raise ShapeError(f"block input must be [B, T, {block.wq.shape[0]}], got {h.shape}")
    provider = provider or NoDelta()
    a = rmsnorm(h, block.g1, NORM_EPS)
    q, k, v = matmul(a, block.wq), matmul(a, block.wk), matmul(a, block.wv)
    deltas = provider.qkv_delta(layer, a)
    if deltas is not None:
        dq, dk, dv = deltas
        for name, base, delta in (("Q", q, dq), ("K", k, dk), ("V", v, dv)):
            if delta.shape != base.shape:
                raise ShapeError(f"{name} delta shape {delta.shape} != {base.shape}")
        add_flops(3 * q.size)
        q, k, v = q + dq, k + dk, v + dv

    t = h.shape[1]
    dh = block.wq.shape[0] // n_heads
    qh, kh, vh = (_split_heads(x, n_heads) for x in (q, k, v))
    scores = matmul(qh, transpose(kh)) * (1.0 / math.sqrt(dh))
    scores = np.where(_causal_mask(t), scores, -np.inf)
    probs = softmax_rows(scores)
    attn = _merge_heads(matmul(probs, vh))
    h1 = h + matmul(attn, block.wo)

    m = rmsnorm(h1, block.g2, NORM_EPS)
    u = matmul(m, block.w1)
    z = silu(u)
    y = matmul(z, block.w2)
    h2 = h1 + y
    delta = provider.mlp_delta(layer, y)
    if delta is not None:
        if delta.shape != y.shape:
            raise ShapeError(f"MLP delta shape {delta.shape} != {y.shape}")
        h2 = h2 + delta
    add_flops(2 * h.size + scores.size + (h.size if delta is not None else 0))
    return h2, BlockCache(h, a, q, k, v, probs, attn, h1, m, u, z)


def backward_block(
    dout: np.ndarray,
    block: DecoderBlock,
    cache: BlockCache,
    n_heads: int,
    layer: int = 0,
    provider: DeltaProvider | None = None,
    weight_grads: bool = False,
) -> tuple[np.ndarray, DecoderBlock | None]:
    """Gradient of the block input; optionally the block's weight gradients too."""
    provider = provider or NoDelta()
    d = block.wq.shape[0]
    dh_head = d // n_heads

    dy = dout
    branch = provider.mlp_backward(layer, dout)
    if branch is not None:
        dy = dy + branch
    dz = matmul(dy, transpose(block.w2))
    du = silu_backward(cache.u, dz)
    dm = matmul(du, transpose(block.w1))
    dn, dg2 = rmsnorm_backward(cache.h1, block.g2, dm, NORM_EPS)
    dh1 = dout + dn

    dattn = matmul(dh1, transpose(block.wo))
    dattn_h = _split_heads(dattn, n_heads)
    qh, kh, vh = (_split_heads(x, n_heads) for x in (cache.q, cache.k, cache.v))
    dprobs = matmul(dattn_h, transpose(vh))
    dvh = matmul(transpose(cache.probs), dattn_h)
    dscores = softmax_rows_backward(cache.probs, dprobs) * (1.0 / math.sqrt(dh_head))
    dqh = matmul(dscores, kh)
    dkh = matmul(transpose(dscores), qh)
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)

    da = matmul(dq, transpose(block.wq)) + matmul(dk, transpose(block.wk))
    da = da + matmul(dv, transpose(block.wv))
    branch = provider.qkv_backward(layer, dq, dk, dv)
    if branch is not None:
        da = da + branch
    dn, dg1 = rmsnorm_backward(cache.h, block.g1, da, NORM_EPS)
    dh = dh1 + dn
    add_flops(4 * dout.size + cache.probs.size)

    grads = None
    if weight_grads:
        def outer(x: np.ndarray, g: np.ndarray) -> np.ndarray:
            return matmul(transpose(x.reshape(-1, x.shape[-1])), g.reshape(-1, g.shape[-1]))

        grads = DecoderBlock(
            wq=outer(cache.a, dq),
            wk=outer(cache.a, dk),
            wv=outer(cache.a, dv),
            wo=outer(cache.attn, dh1),
            w1=outer(cache.m, du),
            w2=outer(cache.z, dy),
            g1=dg1,
            g2=dg2,
        )
    return dh, grads


# -- whole backbone -----------------------------------------------------------

@dataclass
class ForwardCache:
    blocks: list[BlockCache] = field(default_factory=list)
    final_in: np.ndarray | None = None
    final_out: np.ndarray | None = None


def forward_hidden(
    h: np.ndarray, backbone: Backbone, provider: DeltaProvider | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Everything after the embedding: blocks, final norm, LM head."""
    cache = ForwardCache()
    cfg = backbone.config
    for i, blk in enumerate(backbone.blocks):
        h, c = forward_block(h, blk, cfg.n_heads, i, provider)
        cache.blocks.append(c)
    cache.final_in = h
    cache.final_out = rmsnorm(h, backbone.final_gain, NORM_EPS)
    return matmul(cache.final_out, backbone.lm_head), cache


def backward_hidden(
    dlogits: np.ndarray,
    backbone: Backbone,
    cache: ForwardCache,
    provider: DeltaProvider | None = None,
    weight_grads: bool = False,
) -> tuple[np.ndarray, dict | None]:
    """Back-propagate ``dlogits`` to the embedding output.

    Blocks are visited last to first, so the provider sees backward hooks in
    descending layer order.
    """
    cfg = backbone.config
    dfinal = matmul(dlogits, transpose(backbone.lm_head))
    dh, dgain = rmsnorm_backward(cache.final_in, backbone.final_gain, dfinal, NORM_EPS)
    block_grads: list[DecoderBlock | None] = [None] * cfg.n_layers
    for i in range(cfg.n_layers - 1, -1, -1):
        dh, g = backward_block(
            dh, backbone.blocks[i], cache.blocks[i], cfg.n_heads, i, provider, weight_grads
        )
        block_grads[i] = g
    if not weight_grads:
        return dh, None
    flat_out = cache.final_out.reshape(-1, cfg.d_model)
    grads = {
        "blocks": block_grads,
        "final_gain": dgain,
        "lm_head": matmul(transpose(flat_out), dlogits.reshape(-1, cfg.vocab)),
    }
    return dh, grads


def embedding_grad(tokens, dh0: np.ndarray, backbone: Backbone) -> np.ndarray:
    """Scatter-add of the embedding-output gradient into the table (token order)."""
    arr = _as_batch(tokens).reshape(-1)
    out = np.zeros_like(backbone.embedding)
    np.add.at(out, arr, dh0.reshape(-1, backbone.config.d_model))
    return out


def forward_backbone(tokens, backbone: Backbone, provider: DeltaProvider | None = None) -> np.ndarray:
    """Logits ``[T, V]`` for 1-D tokens or ``[B, T, V]`` for a batch."""
    h = embed(_as_batch(tokens), backbone)
    logits, _ = forward_hidden(h, backbone, provider)
    return logits[0] if np.ndim(tokens) == 1 else logits


def generate(prompt: Sequence[int], n_new: int, backbone: Backbone, provider: DeltaProvider | None = None) -> list[int]:
    """Greedy decoding; ``argmax`` breaks ties toward the lowest token id."""
    seq = [int(t) for t in prompt]
    if n_new < 0:
        raise InputError("n_new must be >= 0")
    if len(seq) + n_new > backbone.config.max_seq:
        raise InputError(
            f"prompt {len(seq)} + {n_new} new tokens exceeds max_seq {backbone.config.max_seq}"
        )
    for _ in range(n_new):
        logits = forward_backbone(seq, backbone, provider)
        seq.append(int(np.argmax(logits[-1])))
    return seq


def lm_loss_and_grads(backbone: Backbone, inputs: np.ndarray, targets: np.ndarray):
    """Full-backbone loss and gradients, used by pretraining."""
    h0 = embed(inputs, backbone)
    logits, cache = forward_hidden(h0, backbone)
    loss, dlogits = cross_entropy(logits, targets)
    dh0, grads = backward_hidden(dlogits, backbone, cache, weight_grads=True)
    flat = [embedding_grad(inputs, dh0, backbone)]
    for g in grads["blocks"]:
        flat.extend(g.tensors())
    flat.extend([grads["final_gain"], grads["lm_head"]])
    return loss, flat


__all__ = [
    "Backbone",
    "BlockCache",
    "DecoderBlock",
    "DeltaProvider",
    "ForwardCache",
    "ModelConfig",
    "NoDelta",
    "backward_block",
    "backward_hidden",
    "embed",
    "embedding_grad",
    "forward_backbone",
    "forward_block",
    "forward_hidden",
    "generate",
    "lm_loss_and_grads",
    "sinusoidal_positions",
]
