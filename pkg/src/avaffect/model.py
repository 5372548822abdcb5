"""Temporal model over per-second fused representations.

Per-segment fused vectors go through an LSTM left-to-right; the final
hidden state (or, in interpretable mode, an attention-weighted context
over all hidden states) feeds a sigmoid prediction head. Variant routing
covers the bi-modal cross-attention model, the all-self-attention
ablation, both uni-modal models, and a no-LSTM ablation that averages
fused segments instead.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import coattention as ca
from . import encoders as enc
from . import tensorio
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError, FormatError, InputError

VARIANTS = ("SA-CA", "SA-SA", "AudioOnly", "VisionOnly", "CoAttnNoLSTM")
TRAITS = ("agreeableness", "conscientiousness", "extraversion", "neuroticism", "openness")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "SA-CA"
    n_segments: int = 10
    frames_per_segment: int = 4
    d_model: int = 64
    d_hidden: int = 64
    heads: int = 4
    d_attn: int = 0                 # 0 -> d_hidden
    depth: int = 1
    task: str = "binary"            # "binary" | "traits"
    interpretable: bool = False
    standard_block: bool = False
    visual_patch: int = 56
    audio_time_patch: int = 14
    audio_coeff_patch: int = 0      # 0 -> full coefficient width

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in ("binary", "traits"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_segments < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("n_segments, depth and heads must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.interpretable and not self.uses_lstm:
            raise ConfigError("interpretable mode requires an LSTM variant")

    @property
    def uses_visual(self) -> bool:
        return self.variant != "AudioOnly"

    @property
    def uses_audio(self) -> bool:
        return self.variant != "VisionOnly"

    @property
    def bimodal(self) -> bool:
        return self.uses_visual and self.uses_audio

    @property
    def uses_lstm(self) -> bool:
        return self.variant != "CoAttnNoLSTM"

    @property
    def cross_modal(self) -> bool:
        return self.variant in ("SA-CA", "CoAttnNoLSTM")

    @property
    def n_outputs(self) -> int:
        return 1 if self.task == "binary" else len(TRAITS)

    @property
    def attn_width(self) -> int:
        return self.d_attn or self.d_hidden


@dataclass(frozen=True)
class ModalityGeometry:
    kind: str                       # "patches" | "tokens"
    patch_dim: int = 0
    n_tokens: int = 0

    def __post_init__(self):
        if self.kind not in ("patches", "tokens"):
            raise ConfigError(f"unknown modality kind {self.kind!r}")


@dataclass(frozen=True)
class DataGeometry:
    visual: Optional[ModalityGeometry] = None
    audio: Optional[ModalityGeometry] = None


@dataclass
class LstmParams:
    wx_update: Tensor
    wx_forget: Tensor
    wx_output: Tensor
    wx_cell: Tensor
    wh_update: Tensor
    wh_forget: Tensor
    wh_output: Tensor
    wh_cell: Tensor
    b_update: Tensor
    b_forget: Tensor
    b_output: Tensor
    b_cell: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "wx_update", "wx_forget", "wx_output", "wx_cell",
            "wh_update", "wh_forget", "wh_output", "wh_cell",
            "b_update", "b_forget", "b_output", "b_cell")}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class AttnPoolParams:
    w_score: Tensor                 # (d_hidden, d_attn)
    b_score: Tensor                 # (d_attn,)
    v_score: Tensor                 # (d_attn,)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_score": self.w_score, f"{prefix}.b_score": self.b_score,
                f"{prefix}.v_score": self.v_score}


@dataclass
class ModelParams:
    visual_encoder: Optional[enc.PatchEncoderParams] = None
    audio_encoder: Optional[enc.PatchEncoderParams] = None
    blocks: list[ca.CoAttentionParams] = field(default_factory=list)
    solo_blocks: list[ca.SubBlockParams] = field(default_factory=list)
    lstm: Optional[LstmParams] = None
    pool: Optional[AttnPoolParams] = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if params.visual_encoder is not None:
        out.update(params.visual_encoder.named("visual_encoder"))
    if params.audio_encoder is not None:
        out.update(params.audio_encoder.named("audio_encoder"))
    for i, block in enumerate(params.blocks):
        out.update(block.named(f"block{i}"))
    for i, block in enumerate(params.solo_blocks):
        out.update(block.named(f"solo{i}"))
    if params.lstm is not None:
        out.update(params.lstm.named("lstm"))
    if params.pool is not None:
        out.update(params.pool.named("pool"))
    out["head.w"] = params.head_w
    out["head.b"] = params.head_b
    return out


def parameter_groups(params: ModelParams) -> dict[str, dict[str, Tensor]]:
    """Named tensors bucketed by architectural group."""
    groups: dict[str, dict[str, Tensor]] = {}
    for name, tensor in named_parameters(params).items():
        group = name.split(".")[0]
        groups.setdefault(group, {})[name] = tensor
    return groups


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def init_lstm_params(d_in: int, d_hidden: int, rng: np.random.Generator,
                     dtype=np.float32) -> LstmParams:
    def bias(value):
        return ad.parameter(np.full(d_hidden, value, dtype=np.float64), dtype=dtype)

    return LstmParams(
        wx_update=_xavier(rng, d_in, d_hidden, dtype),
        wx_forget=_xavier(rng, d_in, d_hidden, dtype),
        wx_output=_xavier(rng, d_in, d_hidden, dtype),
        wx_cell=_xavier(rng, d_in, d_hidden, dtype),
        wh_update=_xavier(rng, d_hidden, d_hidden, dtype),
        wh_forget=_xavier(rng, d_hidden, d_hidden, dtype),
        wh_output=_xavier(rng, d_hidden, d_hidden, dtype),
        wh_cell=_xavier(rng, d_hidden, d_hidden, dtype),
        b_update=bias(0.0),
        b_forget=bias(1.0),   # open forget gates at init
        b_output=bias(0.0),
        b_cell=bias(0.0),
    )


def init_attn_pool_params(d_hidden: int, d_attn: int, rng: np.random.Generator,
                          dtype=np.float32) -> AttnPoolParams:
    limit = math.sqrt(6.0 / (d_attn + 1))
    return AttnPoolParams(
        w_score=_xavier(rng, d_hidden, d_attn, dtype),
        b_score=ad.parameter(np.zeros(d_attn), dtype=dtype),
        v_score=ad.parameter(rng.uniform(-limit, limit, size=d_attn), dtype=dtype),
    )


def init_model_params(cfg: ModelConfig, geom: DataGeometry, seed: int = 0,
                      dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    if cfg.uses_visual:
        if geom.visual is None:
            raise ConfigError(f"variant {cfg.variant} needs visual inputs")
        if geom.visual.kind == "patches":
            params.visual_encoder = enc.init_patch_encoder(
                geom.visual.patch_dim, geom.visual.n_tokens, cfg.d_model, rng, dtype)
    if cfg.uses_audio:
        if geom.audio is None:
            raise ConfigError(f"variant {cfg.variant} needs audio inputs")
        if geom.audio.kind == "patches":
            params.audio_encoder = enc.init_patch_encoder(
                geom.audio.patch_dim, geom.audio.n_tokens, cfg.d_model, rng, dtype)
    if cfg.bimodal:
        params.blocks = [
            ca.init_coattention_params(cfg.d_model, cfg.heads, rng, dtype, cfg.standard_block)
            for _ in range(cfg.depth)
        ]
    else:
        params.solo_blocks = [
            ca.init_subblock(cfg.d_model, cfg.heads, rng, dtype, cfg.standard_block)
            for _ in range(cfg.depth)
        ]
    if cfg.uses_lstm:
        params.lstm = init_lstm_params(cfg.d_model, cfg.d_hidden, rng, dtype)
        if cfg.interpretable:
            params.pool = init_attn_pool_params(cfg.d_hidden, cfg.attn_width, rng, dtype)
    head_in = cfg.d_hidden if cfg.uses_lstm else cfg.d_model
    params.head_w = _xavier(rng, head_in, cfg.n_outputs, dtype)
    params.head_b = ad.parameter(np.zeros(cfg.n_outputs), dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# recurrent chain
# ---------------------------------------------------------------------------


def zero_state(d_hidden: int, dtype=np.float32, batch: int | None = None) -> LstmState:
    shape = (d_hidden,) if batch is None else (batch, d_hidden)
    return LstmState(ad.constant(np.zeros(shape), dtype=dtype),
                     ad.constant(np.zeros(shape), dtype=dtype))


def lstm_step(x: Tensor, prev: LstmState, p: LstmParams) -> LstmState:
    """One gated recurrence step.

    update/forget/output gates are logistic in (0, 1); the candidate cell
    is tanh; new cell = forget * old + update * candidate; hidden =
    output * tanh(cell).
    """
    def gate(wx, wh, b, squash):
        return squash(ad.add(ad.add(ad.matmul(x, wx), ad.matmul(prev.h, wh)), b))

    u = gate(p.wx_update, p.wh_update, p.b_update, ad.sigmoid)
    f = gate(p.wx_forget, p.wh_forget, p.b_forget, ad.sigmoid)
    o = gate(p.wx_output, p.wh_output, p.b_output, ad.sigmoid)
    candidate = gate(p.wx_cell, p.wh_cell, p.b_cell, ad.tanh)
    c = ad.add(ad.mul(f, prev.c), ad.mul(u, candidate))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def run_lstm(inputs: Sequence[Tensor], p: LstmParams,
             initial: LstmState | None = None) -> tuple[Tensor, list[LstmState]]:
    """Fold the step left-to-right from a zero state; returns (h_n, all states)."""
    inputs = list(inputs)
    if not inputs:
        raise InputError("run_lstm needs at least one input")
    d_hidden = p.wh_update.shape[0]
    first = inputs[0]
    batch = first.shape[0] if first.data.ndim == 2 else None
    state = initial or zero_state(d_hidden, first.data.dtype, batch)
    states = []
    for x in inputs:
        state = lstm_step(x, state, p)
        states.append(state)
    return states[-1].h, states


def attention_pool(states: Sequence[Tensor], ap: AttnPoolParams,
                   scorer: Callable[[Tensor, AttnPoolParams], Tensor] | None = None
                   ) -> tuple[Tensor, Tensor]:
    """Additive-attention summary of hidden states.

    score_i = v . tanh(W h_i + b); alphas = softmax(scores); context =
    sum_i alpha_i h_i. A custom ``scorer`` may replace the additive form;
    it receives the stacked states and must return per-state scores.
    """
    states = list(states)
    if not states:
        raise InputError("attention_pool needs at least one state")
    batched = states[0].data.ndim == 2
    stacked = ad.stack(states, axis=1 if batched else 0)  # (B, n, d) or (n, d)
    if scorer is not None:
        scores = scorer(stacked, ap)
    else:
        hidden = ad.tanh(ad.add(ad.matmul(stacked, ap.w_score), ap.b_score))
        if batched:
            b, n, _ = stacked.shape
            scores = ad.reshape(ad.matmul(hidden, ad.reshape(ap.v_score, (-1, 1))), (b, n))
        else:
            scores = ad.matmul(hidden, ap.v_score)
    alphas = ad.softmax(scores, axis=-1)
    if batched:
        b, n, d = stacked.shape
        context = ad.reshape(ad.matmul(ad.reshape(alphas, (b, 1, n)), stacked), (b, d))
    else:
        context = ad.matmul(alphas, stacked)
    return context, alphas


def predict(h: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Sigmoid readout; one output for binary affect, five for traits."""
    return ad.sigmoid(ad.add(ad.matmul(h, head_w), head_b))


# ---------------------------------------------------------------------------
# sample plumbing and full forward
# ---------------------------------------------------------------------------


@dataclass
class SampleInputs:
    """Model-ready arrays for one sample: one entry per segment per modality.

    ``kind`` is "tokens" for precomputed embeddings consumed verbatim and
    "patches" for flattened media patches awaiting projection.
    """

    sample_id: str
    label: np.ndarray                      # (n_outputs,)
    visual: Optional[list[np.ndarray]] = None
    audio: Optional[list[np.ndarray]] = None
    visual_kind: str = "tokens"
    audio_kind: str = "tokens"

    @property
    def n_segments(self) -> int:
        source = self.visual if self.visual is not None else self.audio
        return len(source)


@dataclass
class ForwardResult:
    prediction: Tensor                     # (n_outputs,) or (B, n_outputs)
    alphas: Optional[Tensor] = None        # (n,) or (B, n)


def _modality_tokens(arrays: list[np.ndarray] | None, kind: str,
                     enc_params: enc.PatchEncoderParams | None, cfg: ModelConfig,
                     modality: str, dtype) -> list[Tensor]:
    if arrays is None:
        raise InputError(f"variant {cfg.variant} requires {modality} inputs")
    out = []
    for arr in arrays:
        if kind == "tokens":
            if arr.shape[-1] != cfg.d_model:
                raise DimensionError(
                    f"precomputed {modality} tokens have width {arr.shape[-1]}, "
                    f"model expects d_model={cfg.d_model}")
            out.append(ad.constant(arr, dtype=dtype))
        else:
            if enc_params is None:
                raise ConfigError(f"{modality} encoder parameters missing for patch inputs")
            out.append(enc.project_patches(arr, enc_params))
    return out


def _fused_segments(visual: list[Tensor] | None, audio: list[Tensor] | None,
                    cfg: ModelConfig, params: ModelParams) -> list[Tensor]:
    n = len(visual) if visual is not None else len(audio)
    fused = []
    for i in range(n):
        if cfg.bimodal:
            fv, fa = visual[i], audio[i]
            for block in params.blocks:
                fv, fa = ca.coattention_block(fv, fa, block, cfg.cross_modal, cfg.standard_block)
            fused.append(ca.fuse_modalities(fv, fa, params.blocks[-1].fusion_w,
                                            params.blocks[-1].fusion_b))
        else:
            tokens = visual[i] if cfg.uses_visual else audio[i]
            for block in params.solo_blocks:
                tokens = ca.self_attention_subblock(tokens, block, cfg.standard_block)
            fused.append(ad.tmean(tokens, axis=-2))
    return fused


def _predict_from_fused(fused: list[Tensor], cfg: ModelConfig,
                        params: ModelParams) -> ForwardResult:
    if cfg.uses_lstm:
        h_final, states = run_lstm(fused, params.lstm)
        if cfg.interpretable:
            context, alphas = attention_pool([s.h for s in states], params.pool)
            return ForwardResult(predict(context, params.head_w, params.head_b), alphas)
        return ForwardResult(predict(h_final, params.head_w, params.head_b))
    batched = fused[0].data.ndim == 2
    stacked = ad.stack(fused, axis=1 if batched else 0)
    pooled = ad.tmean(stacked, axis=1 if batched else 0)
    return ForwardResult(predict(pooled, params.head_w, params.head_b))


def forward(sample: SampleInputs, cfg: ModelConfig, params: ModelParams) -> ForwardResult:
    """Single-sample forward pass; routing follows the configured variant."""
    dtype = params.head_w.data.dtype
    visual = audio = None
    if cfg.uses_visual:
        visual = _modality_tokens(sample.visual, sample.visual_kind,
                                  params.visual_encoder, cfg, "visual", dtype)
    if cfg.uses_audio:
        audio = _modality_tokens(sample.audio, sample.audio_kind,
                                 params.audio_encoder, cfg, "audio", dtype)
    if visual is not None and audio is not None and len(visual) != len(audio):
        raise InputError("visual and audio segment counts differ")
    return _predict_from_fused(_fused_segments(visual, audio, cfg, params), cfg, params)


def forward_batch(samples: Sequence[SampleInputs], cfg: ModelConfig,
                  params: ModelParams) -> ForwardResult:
    """Batched forward; all samples must share segment counts and kinds."""
    samples = list(samples)
    if not samples:
        raise InputError("forward_batch needs at least one sample")
    n = samples[0].n_segments
    if any(s.n_segments != n for s in samples):
        raise InputError("forward_batch requires a uniform segment count")
    dtype = params.head_w.data.dtype

    def stack_modality(select) -> list[np.ndarray]:
        return [np.stack([select(s)[i] for s in samples]) for i in range(n)]

    visual = audio = None
    if cfg.uses_visual:
        visual = _modality_tokens(stack_modality(lambda s: s.visual), samples[0].visual_kind,
                                  params.visual_encoder, cfg, "visual", dtype)
    if cfg.uses_audio:
        audio = _modality_tokens(stack_modality(lambda s: s.audio), samples[0].audio_kind,
                                 params.audio_encoder, cfg, "audio", dtype)
    return _predict_from_fused(_fused_segments(visual, audio, cfg, params), cfg, params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_TENSORS = "checkpoint.tensors"
CHECKPOINT_INDEX = "checkpoint.json"


@dataclass
class Checkpoint:
    config: ModelConfig
    geometry: DataGeometry
    params: ModelParams
    frontend: dict = field(default_factory=dict)   # MFCC / preprocessing echo


def save_checkpoint(out_dir, cfg: ModelConfig, geom: DataGeometry,
                    params: ModelParams, frontend: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    named = named_parameters(params)
    tensorio.write_tensors(os.path.join(out_dir, CHECKPOINT_TENSORS), named)
    index = {
        "format": 1,
        "config": asdict(cfg),
        "geometry": {
            "visual": asdict(geom.visual) if geom.visual else None,
            "audio": asdict(geom.audio) if geom.audio else None,
        },
        "frontend": frontend or {},
        "tensors": [
            {"name": name, "shape": list(t.shape), "dtype": t.data.dtype.name}
            for name, t in named.items()
        ],
    }
    with open(os.path.join(out_dir, CHECKPOINT_INDEX), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)


def load_checkpoint(out_dir) -> Checkpoint:
    index_path = os.path.join(out_dir, CHECKPOINT_INDEX)
    tensors_path = os.path.join(out_dir, CHECKPOINT_TENSORS)
    if not os.path.exists(index_path) or not os.path.exists(tensors_path):
        raise InputError(f"no checkpoint found under {out_dir}")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("format") != 1:
        raise FormatError(f"unsupported checkpoint format {index.get('format')}")
    cfg = ModelConfig(**index["config"])
    geo = index["geometry"]
    geom = DataGeometry(
        visual=ModalityGeometry(**geo["visual"]) if geo.get("visual") else None,
        audio=ModalityGeometry(**geo["audio"]) if geo.get("audio") else None,
    )
    stored = tensorio.read_tensors(tensors_path)
    dtype = next(iter(stored.values())).dtype if stored else np.float32
    params = init_model_params(cfg, geom, seed=0, dtype=dtype)
    named = named_parameters(params)
    if set(named) != set(stored):
        missing = set(named) ^ set(stored)
        raise FormatError(f"checkpoint tensor names do not match the config: {sorted(missing)}")
    for name, tensor in named.items():
        if stored[name].shape != tensor.shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {stored[name].shape}, expected {tensor.shape}")
        tensor.data = stored[name].astype(tensor.data.dtype, copy=True)
    return Checkpoint(cfg, geom, params, index.get("frontend", {}))
