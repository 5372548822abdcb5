"""Symmetric two-stream attention fusion.

Each modality runs a self-attention sub-block, then a second sub-block
whose keys/values come from the other modality (cross) or from itself
again (the all-self ablation). A sub-block applies, in order: multi-head
attention, normalization of the attention output, a residual add of the
sub-block input, and a position-wise feed-forward network with no second
residual. ``standard_block=True`` switches to the conventional post-norm
ordering (residual-then-norm around both the attention and the FFN) for
ablations. Finally the two token streams are mean-pooled, concatenated,
and mixed by a fusion linear + ReLU into one vector per segment.

All functions accept unbatched ``(t, d)`` token matrices or batched
``(B, t, d)`` stacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError

LN_EPS = 1e-5


@dataclass
class HeadParams:
    wq: list[Tensor]            # per head, (d_model, d_head)
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor                  # (heads * d_head, d_model)

    @property
    def heads(self) -> int:
        return len(self.wq)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.wq{i}"] = self.wq[i]
            out[f"{prefix}.wk{i}"] = self.wk[i]
            out[f"{prefix}.wv{i}"] = self.wv[i]
        out[f"{prefix}.wo"] = self.wo
        return out


@dataclass
class SubBlockParams:
    attn: HeadParams
    norm_gamma: Tensor
    norm_beta: Tensor
    ffn_w1: Tensor              # (d_model, 2 d_model)
    ffn_b1: Tensor
    ffn_w2: Tensor              # (2 d_model, d_model)
    ffn_b2: Tensor
    norm2_gamma: Optional[Tensor] = None   # standard ordering only
    norm2_beta: Optional[Tensor] = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        out[f"{prefix}.norm_gamma"] = self.norm_gamma
        out[f"{prefix}.norm_beta"] = self.norm_beta
        out[f"{prefix}.ffn_w1"] = self.ffn_w1
        out[f"{prefix}.ffn_b1"] = self.ffn_b1
        out[f"{prefix}.ffn_w2"] = self.ffn_w2
        out[f"{prefix}.ffn_b2"] = self.ffn_b2
        if self.norm2_gamma is not None:
            out[f"{prefix}.norm2_gamma"] = self.norm2_gamma
            out[f"{prefix}.norm2_beta"] = self.norm2_beta
        return out


@dataclass
class CoAttentionParams:
    visual_self: SubBlockParams
    visual_second: SubBlockParams   # cross (keys/values from audio) or second self
    audio_self: SubBlockParams
    audio_second: SubBlockParams
    fusion_w: Tensor                # (2 d_model, d_model)
    fusion_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.visual_self.named(f"{prefix}.visual_self"))
        out.update(self.visual_second.named(f"{prefix}.visual_second"))
        out.update(self.audio_self.named(f"{prefix}.audio_self"))
        out.update(self.audio_second.named(f"{prefix}.audio_second"))
        out[f"{prefix}.fusion_w"] = self.fusion_w
        out[f"{prefix}.fusion_b"] = self.fusion_b
        return out


@dataclass
class FusedSegment:
    fused: Tensor               # (d_model,)
    segment_index: int


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def init_head_params(d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    if d_model % heads:
        raise DimensionError(f"d_model {d_model} must be divisible by heads {heads}")
    d_head = d_model // heads
    return HeadParams(
        wq=[_xavier(rng, d_model, d_head, dtype) for _ in range(heads)],
        wk=[_xavier(rng, d_model, d_head, dtype) for _ in range(heads)],
        wv=[_xavier(rng, d_model, d_head, dtype) for _ in range(heads)],
        wo=_xavier(rng, heads * d_head, d_model, dtype),
    )


def init_subblock(d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                  standard_block: bool = False) -> SubBlockParams:
    hidden = 2 * d_model
    return SubBlockParams(
        attn=init_head_params(d_model, heads, rng, dtype),
        norm_gamma=ad.parameter(np.ones(d_model), dtype=dtype),
        norm_beta=ad.parameter(np.zeros(d_model), dtype=dtype),
        ffn_w1=_xavier(rng, d_model, hidden, dtype),
        ffn_b1=ad.parameter(np.zeros(hidden), dtype=dtype),
        ffn_w2=_xavier(rng, hidden, d_model, dtype),
        ffn_b2=ad.parameter(np.zeros(d_model), dtype=dtype),
        norm2_gamma=ad.parameter(np.ones(d_model), dtype=dtype) if standard_block else None,
        norm2_beta=ad.parameter(np.zeros(d_model), dtype=dtype) if standard_block else None,
    )


def init_coattention_params(d_model: int, heads: int, rng: np.random.Generator,
                            dtype=np.float32, standard_block: bool = False) -> CoAttentionParams:
    return CoAttentionParams(
        visual_self=init_subblock(d_model, heads, rng, dtype, standard_block),
        visual_second=init_subblock(d_model, heads, rng, dtype, standard_block),
        audio_self=init_subblock(d_model, heads, rng, dtype, standard_block),
        audio_second=init_subblock(d_model, heads, rng, dtype, standard_block),
        fusion_w=_xavier(rng, 2 * d_model, d_model, dtype),
        fusion_b=ad.parameter(np.zeros(d_model), dtype=dtype),
    )


def _tokens_rank(t: Tensor) -> int:
    if t.data.ndim not in (2, 3):
        raise DimensionError(f"token tensors must be (t, d) or (B, t, d), got {t.shape}")
    return t.data.ndim


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, hp: HeadParams,
                         return_weights: bool = False):
    """Per-head scaled dot-product attention, heads concatenated then projected.

    Key and value must hold the same number of tokens; the query count is
    free (cross-attention keeps the query-side count).
    """
    rq, rk, rv = _tokens_rank(query), _tokens_rank(key), _tokens_rank(value)
    if rk != rv or key.shape[-2] != value.shape[-2]:
        raise DimensionError("key and value must have equal token counts")
    if rq != rk:
        raise DimensionError("query and key/value must both be batched or both unbatched")
    d_head = hp.wq[0].shape[1]
    scale = 1.0 / math.sqrt(d_head)
    swap = (1, 0) if rk == 2 else (0, 2, 1)
    heads_out = []
    weights = []
    for i in range(hp.heads):
        q = ad.matmul(query, hp.wq[i])
        k = ad.matmul(key, hp.wk[i])
        v = ad.matmul(value, hp.wv[i])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, swap)), scale)
        attn = ad.softmax(scores, axis=-1)
        heads_out.append(ad.matmul(attn, v))
        if return_weights:
            weights.append(attn)
    out = ad.matmul(ad.concat(heads_out, axis=-1), hp.wo)
    if return_weights:
        return out, weights
    return out


def _ffn(x: Tensor, sb: SubBlockParams) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, sb.ffn_w1), sb.ffn_b1))
    return ad.add(ad.matmul(hidden, sb.ffn_w2), sb.ffn_b2)


def _subblock(query_tokens: Tensor, kv_tokens: Tensor, sb: SubBlockParams,
              standard_block: bool = False) -> Tensor:
    attended = multi_head_attention(query_tokens, kv_tokens, kv_tokens, sb.attn)
    if standard_block:
        if sb.norm2_gamma is None:
            raise DimensionError("standard_block requires norm2 parameters")
        x = ad.layer_norm(ad.add(query_tokens, attended), sb.norm_gamma, sb.norm_beta, LN_EPS)
        return ad.layer_norm(ad.add(x, _ffn(x, sb)), sb.norm2_gamma, sb.norm2_beta, LN_EPS)
    normalized = ad.layer_norm(attended, sb.norm_gamma, sb.norm_beta, LN_EPS)
    return _ffn(ad.add(normalized, query_tokens), sb)


def self_attention_subblock(tokens: Tensor, sb: SubBlockParams,
                            standard_block: bool = False) -> Tensor:
    """attention(z, z, z) -> norm -> +z residual -> feed-forward."""
    return _subblock(tokens, tokens, sb, standard_block)


def cross_attention_subblock(query_tokens: Tensor, kv_tokens: Tensor, sb: SubBlockParams,
                             standard_block: bool = False) -> Tensor:
    """Query from one modality, keys/values from the other; residual on the query side."""
    if query_tokens.shape[-1] != kv_tokens.shape[-1]:
        raise DimensionError("query and key/value token widths differ")
    return _subblock(query_tokens, kv_tokens, sb, standard_block)


def fuse_modalities(visual_tokens: Tensor, audio_tokens: Tensor, fusion_w: Tensor,
                    fusion_b: Tensor, segment_index: int | None = None):
    """Mean-pool each stream, concatenate, fusion linear + ReLU.

    Returns a ``FusedSegment`` when ``segment_index`` is given (unbatched
    contract), otherwise the raw fused Tensor.
    """
    pooled_v = ad.tmean(visual_tokens, axis=-2)
    pooled_a = ad.tmean(audio_tokens, axis=-2)
    fused = ad.relu(ad.add(ad.matmul(ad.concat([pooled_v, pooled_a], axis=-1), fusion_w), fusion_b))
    if segment_index is None:
        return fused
    return FusedSegment(fused, segment_index)


def coattention_block(visual_tokens: Tensor, audio_tokens: Tensor, params: CoAttentionParams,
                      cross_modal: bool = True, standard_block: bool = False) -> tuple[Tensor, Tensor]:
    """One full block: self stage then cross (or second self) stage per modality."""
    iv = self_attention_subblock(visual_tokens, params.visual_self, standard_block)
    ia = self_attention_subblock(audio_tokens, params.audio_self, standard_block)
    if cross_modal:
        fv = cross_attention_subblock(iv, ia, params.visual_second, standard_block)
        fa = cross_attention_subblock(ia, iv, params.audio_second, standard_block)
    else:
        fv = self_attention_subblock(iv, params.visual_second, standard_block)
        fa = self_attention_subblock(ia, params.audio_second, standard_block)
    return fv, fa
