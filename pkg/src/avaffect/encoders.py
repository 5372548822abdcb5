"""Per-second segment encoders: raw media in, token sequences out.

Visual segments are sampled to ``m`` frames, resized/cropped/normalized,
then cut into non-overlapping patches that a learned linear map projects
to the model width (one token per patch, plus a learned positional
embedding). Audio MFCC images go through the same patch-projection
scheme. Records that carry precomputed embeddings bypass all of this and
are consumed verbatim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError, InputError
from .mfcc import MfccImage


@dataclass(frozen=True)
class FramePreprocessSpec:
    resize_short_side: int = 128
    center_crop: int = 112

    def __post_init__(self):
        if self.center_crop > self.resize_short_side:
            raise ConfigError("center_crop must not exceed resize_short_side")


@dataclass
class SegmentTokens:
    tokens: Tensor              # (t, d_model)
    modality: str               # "visual" | "audio"
    segment_index: int


@dataclass
class PatchEncoderParams:
    proj_w: Tensor              # (patch_dim, d_model)
    proj_b: Tensor              # (d_model,)
    pos: Tensor                 # (n_tokens, d_model)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.proj_w": self.proj_w, f"{prefix}.proj_b": self.proj_b, f"{prefix}.pos": self.pos}


def init_patch_encoder(patch_dim: int, n_tokens: int, d_model: int,
                       rng: np.random.Generator, dtype=np.float32) -> PatchEncoderParams:
    limit = math.sqrt(6.0 / (patch_dim + d_model))
    return PatchEncoderParams(
        proj_w=ad.parameter(rng.uniform(-limit, limit, size=(patch_dim, d_model)), dtype=dtype),
        proj_b=ad.parameter(np.zeros(d_model), dtype=dtype),
        pos=ad.parameter(rng.normal(0.0, 0.02, size=(n_tokens, d_model)), dtype=dtype),
    )


def sample_frame_indices(total: int, m: int) -> list[int]:
    """Evenly spaced indices floor(k*(T-1)/(m-1)); m == 1 takes the middle frame."""
    if total < 1:
        raise InputError("segment has no frames")
    if m < 1:
        raise InputError("m must be >= 1")
    if m == 1:
        return [(total - 1) // 2]
    return [k * (total - 1) // (m - 1) for k in range(m)]


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resampling of an (h, w, c) image."""
    h, w = image.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess_frame(frame: np.ndarray, spec: FramePreprocessSpec) -> np.ndarray:
    """Resize short side, center crop, normalize to [-1, 1]; (3, crop, crop)."""
    h, w = frame.shape[:2]
    if h <= w:
        new_h = spec.resize_short_side
        new_w = max(spec.center_crop, round(w * spec.resize_short_side / h))
    else:
        new_w = spec.resize_short_side
        new_h = max(spec.center_crop, round(h * spec.resize_short_side / w))
    resized = bilinear_resize(frame, new_h, new_w)
    top = (new_h - spec.center_crop) // 2
    left = (new_w - spec.center_crop) // 2
    crop = resized[top : top + spec.center_crop, left : left + spec.center_crop]
    return ((crop / 255.0 - 0.5) / 0.5).transpose(2, 0, 1)


def sample_and_preprocess_frames(frames, m: int, spec: FramePreprocessSpec | None = None,
                                 dtype=np.float32) -> Tensor:
    """Pick m frames from a segment and preprocess each; (m, 3, crop, crop)."""
    spec = spec or FramePreprocessSpec()
    frames = list(frames)
    indices = sample_frame_indices(len(frames), m)
    out = np.stack([preprocess_frame(np.asarray(frames[i]), spec) for i in indices])
    return Tensor(out.astype(dtype))


def extract_visual_patches(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., m, 3, s, s) -> (..., m*(s/p)^2, 3*p*p), frames outer, grid row-major."""
    *lead, m, c, h, w = frames.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, m, c, gh, patch, gw, patch)
    order = tuple(range(len(lead))) + tuple(len(lead) + ax for ax in (0, 2, 4, 1, 3, 5))
    x = x.transpose(order)
    return x.reshape(*lead, m * gh * gw, c * patch * patch)


def extract_audio_patches(image: np.ndarray, time_patch: int, coeff_patch: int) -> np.ndarray:
    """(..., 3, frames, coeffs) -> patch rows; the time axis is zero-padded
    up to a multiple of ``time_patch``; the coefficient axis must divide."""
    *lead, c, t, q = image.shape
    if c != 3:
        raise DimensionError(f"expected 3 channels, got {c}")
    if q % coeff_patch:
        raise ConfigError(f"coefficient extent {q} is not divisible by patch {coeff_patch}")
    pad = (-t) % time_patch
    if pad:
        widths = [(0, 0)] * len(lead) + [(0, 0), (0, pad), (0, 0)]
        image = np.pad(image, widths)
        t += pad
    gt, gq = t // time_patch, q // coeff_patch
    x = image.reshape(*lead, c, gt, time_patch, gq, coeff_patch)
    order = tuple(range(len(lead))) + tuple(len(lead) + ax for ax in (1, 3, 0, 2, 4))
    x = x.transpose(order)
    return x.reshape(*lead, gt * gq, c * time_patch * coeff_patch)


def project_patches(patches: np.ndarray, params: PatchEncoderParams) -> Tensor:
    """Linear patch embedding plus positional table; accepts (t, p) or (B, t, p)."""
    expected_tokens, d_model = params.pos.shape
    if patches.shape[-2] != expected_tokens:
        raise DimensionError(
            f"got {patches.shape[-2]} patches but positional table holds {expected_tokens}"
        )
    if patches.shape[-1] != params.proj_w.shape[0]:
        raise DimensionError(
            f"patch dim {patches.shape[-1]} does not match projection {params.proj_w.shape}"
        )
    x = ad.constant(patches, dtype=params.proj_w.data.dtype)
    projected = ad.add(ad.matmul(x, params.proj_w), params.proj_b)
    return ad.add(projected, params.pos)


def encode_visual(frames: Tensor, params: PatchEncoderParams, patch: int,
                  segment_index: int = 0) -> SegmentTokens:
    """Preprocessed frames (m, 3, s, s) -> one token per patch."""
    if frames.data.ndim != 4:
        raise DimensionError(f"expected (m, 3, s, s), got {frames.shape}")
    patches = extract_visual_patches(frames.data, patch)
    return SegmentTokens(project_patches(patches, params), "visual", segment_index)


def encode_audio(image: MfccImage, params: PatchEncoderParams, time_patch: int,
                 coeff_patch: int, segment_index: int = 0) -> SegmentTokens:
    """MFCC image (3, frames, coeffs) -> one token per time/coeff patch."""
    patches = extract_audio_patches(image.data.data, time_patch, coeff_patch)
    return SegmentTokens(project_patches(patches, params), "audio", segment_index)


def visual_geometry(m: int, crop: int, patch: int) -> tuple[int, int]:
    """(patch_dim, n_tokens) for the visual encoder."""
    if crop % patch:
        raise ConfigError(f"crop {crop} is not divisible by patch {patch}")
    return 3 * patch * patch, m * (crop // patch) ** 2


def audio_geometry(n_frames: int, n_coeffs: int, time_patch: int, coeff_patch: int) -> tuple[int, int]:
    """(patch_dim, n_tokens) for the audio encoder."""
    if n_coeffs % coeff_patch:
        raise ConfigError(f"coeff extent {n_coeffs} is not divisible by patch {coeff_patch}")
    tokens = math.ceil(n_frames / time_patch) * (n_coeffs // coeff_patch)
    return 3 * time_patch * coeff_patch, tokens
