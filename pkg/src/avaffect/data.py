"""Dataset manifests, one-second segmentation, and synthetic generators.

Manifests are line-delimited JSON with a fixed schema per record:
``id``, ``labels``, ``segments``, ``duration_s``. Each segment descriptor
names its sources per modality: precomputed token tensors (``visual_tokens``
/ ``audio_tokens`` referencing a tensor container entry), a ``frames_dir``
of per-segment image files, or an ``audio`` entry pointing at PCM/WAV.

The synthetic generators plant signals that make architectural claims
testable: ``xor`` labels carry zero single-modality information by
construction, and ``recency`` labels depend only on latents planted in
the final three segments.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import media, mfcc, tensorio
from .encoders import (FramePreprocessSpec, extract_audio_patches, extract_visual_patches,
                       sample_frame_indices, preprocess_frame, audio_geometry, visual_geometry)
from .exceptions import InputError, ResolutionError, ValidationError
from .model import DataGeometry, ModalityGeometry, ModelConfig, SampleInputs, TRAITS

RECORD_KEYS = {"id", "labels", "segments", "duration_s"}
SEGMENT_KEYS = {"visual_tokens", "frames_dir", "audio_tokens", "audio"}


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentWindow:
    index: int
    start_s: float
    end_s: float          # end of real media covered by this window
    pad_s: float          # trailing padding needed to reach one second

    @property
    def padded(self) -> bool:
        return self.pad_s > 0.0


def segment_stream(duration_s: float, fps: float = 25.0,
                   sample_rate: int = 16000) -> list[SegmentWindow]:
    """Consecutive one-second windows; a trailing remainder of at least
    half a second becomes a padded final segment, anything shorter is
    dropped."""
    del fps, sample_rate  # boundaries are in seconds; media mapping is the caller's
    if not duration_s > 0:
        raise InputError(f"duration must be positive, got {duration_s}")
    n_full = int(math.floor(duration_s + 1e-9))
    remainder = duration_s - n_full
    windows = [SegmentWindow(i, float(i), float(i + 1), 0.0) for i in range(n_full)]
    if remainder >= 0.5 - 1e-9:
        windows.append(SegmentWindow(n_full, float(n_full), duration_s, 1.0 - remainder))
    return windows


# ---------------------------------------------------------------------------
# manifest records
# ---------------------------------------------------------------------------


@dataclass
class TokenSource:
    path: str
    key: str


@dataclass
class AudioSource:
    path: str
    format: str                      # "f64" | "i16" | "wav"
    sample_rate: Optional[int] = None


@dataclass
class SegmentSource:
    visual_tokens: Optional[TokenSource] = None
    frames_dir: Optional[str] = None
    audio_tokens: Optional[TokenSource] = None
    audio: Optional[AudioSource] = None

    @property
    def has_visual(self) -> bool:
        return self.visual_tokens is not None or self.frames_dir is not None

    @property
    def has_audio(self) -> bool:
        return self.audio_tokens is not None or self.audio is not None


@dataclass
class SampleRecord:
    id: str
    labels: dict[str, float]
    segments: list[SegmentSource]
    duration_s: float


def _parse_segment(raw: dict, record_id: str) -> SegmentSource:
    unknown = set(raw) - SEGMENT_KEYS
    if unknown:
        raise ValidationError(f"record {record_id}: unknown segment keys {sorted(unknown)}")
    seg = SegmentSource()
    if "visual_tokens" in raw:
        seg.visual_tokens = TokenSource(**raw["visual_tokens"])
    if "frames_dir" in raw:
        seg.frames_dir = raw["frames_dir"]
    if "audio_tokens" in raw:
        seg.audio_tokens = TokenSource(**raw["audio_tokens"])
    if "audio" in raw:
        seg.audio = AudioSource(**raw["audio"])
    if seg.visual_tokens is not None and seg.frames_dir is not None:
        raise ValidationError(f"record {record_id}: segment declares two visual sources")
    if seg.audio_tokens is not None and seg.audio is not None:
        raise ValidationError(f"record {record_id}: segment declares two audio sources")
    if not seg.has_visual and not seg.has_audio:
        raise ValidationError(f"record {record_id}: segment has no modality source")
    return seg


def _segment_files(seg: SegmentSource) -> list[str]:
    files = []
    if seg.visual_tokens:
        files.append(seg.visual_tokens.path)
    if seg.frames_dir:
        files.append(seg.frames_dir)
    if seg.audio_tokens:
        files.append(seg.audio_tokens.path)
    if seg.audio:
        files.append(seg.audio.path)
    return files


def load_manifest(path) -> list[SampleRecord]:
    """Parse and validate a JSONL manifest; order follows the file."""
    base = os.path.dirname(os.path.abspath(path))
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            unknown = set(raw) - RECORD_KEYS
            if unknown:
                raise ValidationError(f"{path}:{line_no}: unknown record keys {sorted(unknown)}")
            missing = RECORD_KEYS - set(raw)
            if missing:
                raise ValidationError(f"{path}:{line_no}: missing record keys {sorted(missing)}")
            record_id = raw["id"]
            if not isinstance(record_id, str) or not record_id:
                raise ValidationError(f"{path}:{line_no}: id must be a non-empty string")
            if record_id in seen:
                raise ValidationError(f"duplicate record id {record_id!r}")
            seen.add(record_id)
            labels = raw["labels"]
            if not isinstance(labels, dict) or not labels:
                raise ValidationError(f"record {record_id}: labels must be a non-empty object")
            for key, value in labels.items():
                if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                    raise ValidationError(
                        f"record {record_id}: label {key!r}={value!r} outside [0, 1]")
            if not isinstance(raw["segments"], list) or not raw["segments"]:
                raise ValidationError(f"record {record_id}: segments must be a non-empty list")
            segments = [_parse_segment(s, record_id) for s in raw["segments"]]
            shape0 = (segments[0].has_visual, segments[0].has_audio)
            if any((s.has_visual, s.has_audio) != shape0 for s in segments):
                raise ValidationError(f"record {record_id}: segments mix modality layouts")
            for seg in segments:
                for ref in _segment_files(seg):
                    resolved = ref if os.path.isabs(ref) else os.path.join(base, ref)
                    if not os.path.exists(resolved):
                        raise ResolutionError(f"record {record_id}: missing file {ref}")
            records.append(SampleRecord(record_id, dict(labels), segments,
                                        float(raw["duration_s"])))
    return records


def record_to_json(record: SampleRecord) -> dict:
    segments = []
    for seg in record.segments:
        entry: dict = {}
        if seg.visual_tokens:
            entry["visual_tokens"] = {"path": seg.visual_tokens.path, "key": seg.visual_tokens.key}
        if seg.frames_dir:
            entry["frames_dir"] = seg.frames_dir
        if seg.audio_tokens:
            entry["audio_tokens"] = {"path": seg.audio_tokens.path, "key": seg.audio_tokens.key}
        if seg.audio:
            audio = {"path": seg.audio.path, "format": seg.audio.format}
            if seg.audio.sample_rate is not None:
                audio["sample_rate"] = seg.audio.sample_rate
            entry["audio"] = audio
        segments.append(entry)
    return {"id": record.id, "labels": record.labels, "segments": segments,
            "duration_s": record.duration_s}


def save_manifest(records: list[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record), sort_keys=True,
                                separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# record -> model inputs
# ---------------------------------------------------------------------------


def manifest_geometry(records: list[SampleRecord], cfg: ModelConfig,
                      mfcc_cfg: mfcc.MfccConfig, spec: FramePreprocessSpec) -> DataGeometry:
    """Derive encoder geometry from the first record's source kinds."""
    first = records[0].segments[0]
    visual = audio = None
    if first.has_visual:
        if first.visual_tokens is not None:
            visual = ModalityGeometry("tokens")
        else:
            patch_dim, n_tokens = visual_geometry(cfg.frames_per_segment, spec.center_crop,
                                                  cfg.visual_patch)
            visual = ModalityGeometry("patches", patch_dim, n_tokens)
    if first.has_audio:
        if first.audio_tokens is not None:
            audio = ModalityGeometry("tokens")
        else:
            coeff_patch = cfg.audio_coeff_patch or mfcc_cfg.mfcc_coeffs
            patch_dim, n_tokens = audio_geometry(mfcc_cfg.frames_per_second(),
                                                 mfcc_cfg.mfcc_coeffs,
                                                 cfg.audio_time_patch, coeff_patch)
            audio = ModalityGeometry("patches", patch_dim, n_tokens)
    return DataGeometry(visual=visual, audio=audio)


def label_vector(labels: dict[str, float], task: str, record_id: str) -> np.ndarray:
    if task == "binary":
        if len(labels) != 1:
            raise ValidationError(
                f"record {record_id}: binary task expects exactly one label, got {sorted(labels)}")
        return np.array([next(iter(labels.values()))], dtype=np.float64)
    if set(labels) != set(TRAITS):
        raise ValidationError(
            f"record {record_id}: traits task expects labels {TRAITS}, got {sorted(labels)}")
    return np.array([labels[t] for t in TRAITS], dtype=np.float64)


def _resolve(base: str, ref: str) -> str:
    return ref if os.path.isabs(ref) else os.path.join(base, ref)


def _load_audio_signal(source: AudioSource, base: str, expected_rate: int) -> np.ndarray:
    path = _resolve(base, source.path)
    if source.format == "wav":
        samples, rate = media.read_wav(path)
    else:
        samples = media.read_pcm(path, source.format)
        rate = source.sample_rate
        if rate is None:
            raise ValidationError(f"raw PCM source {source.path} must declare sample_rate")
    if rate != expected_rate:
        raise InputError(
            f"{source.path}: sample rate {rate} differs from configured {expected_rate}")
    if samples.shape[0] < expected_rate:
        padded = np.zeros(expected_rate)
        padded[: samples.shape[0]] = samples
        samples = padded
    return samples[:expected_rate]


def load_sample_inputs(record: SampleRecord, cfg: ModelConfig, base_dir: str,
                       mfcc_cfg: mfcc.MfccConfig | None = None,
                       preprocess: FramePreprocessSpec | None = None,
                       token_cache: dict | None = None) -> SampleInputs:
    """Materialize one record into model-ready per-segment arrays."""
    mfcc_cfg = mfcc_cfg or mfcc.MfccConfig()
    preprocess = preprocess or FramePreprocessSpec()
    cache = token_cache if token_cache is not None else {}

    def tokens_from(source: TokenSource) -> np.ndarray:
        path = _resolve(base_dir, source.path)
        if path not in cache:
            cache[path] = tensorio.read_tensors(path)
        entries = cache[path]
        if source.key not in entries:
            raise ResolutionError(f"record {record.id}: no tensor {source.key!r} in {source.path}")
        arr = entries[source.key]
        if arr.ndim != 2:
            raise ValidationError(f"record {record.id}: token tensor {source.key!r} must be rank 2")
        return arr

    visual: list[np.ndarray] | None = None
    audio: list[np.ndarray] | None = None
    visual_kind = audio_kind = "tokens"
    first = record.segments[0]
    if first.has_visual and cfg.uses_visual:
        visual = []
        for seg in record.segments:
            if seg.visual_tokens is not None:
                visual.append(tokens_from(seg.visual_tokens))
            else:
                visual_kind = "patches"
                frame_dir = _resolve(base_dir, seg.frames_dir)
                names = sorted(os.listdir(frame_dir))
                if not names:
                    raise InputError(f"record {record.id}: empty frames dir {seg.frames_dir}")
                indices = sample_frame_indices(len(names), cfg.frames_per_segment)
                frames = np.stack([
                    preprocess_frame(media.read_frame(os.path.join(frame_dir, names[i])), preprocess)
                    for i in indices
                ])
                visual.append(extract_visual_patches(frames.astype(np.float32), cfg.visual_patch))
    if first.has_audio and cfg.uses_audio:
        audio = []
        coeff_patch = cfg.audio_coeff_patch or mfcc_cfg.mfcc_coeffs
        for seg in record.segments:
            if seg.audio_tokens is not None:
                audio.append(tokens_from(seg.audio_tokens))
            else:
                audio_kind = "patches"
                signal = _load_audio_signal(seg.audio, base_dir, mfcc_cfg.sample_rate)
                image = mfcc.mfcc_image_from_signal(signal, mfcc_cfg)
                audio.append(extract_audio_patches(image.data.data, cfg.audio_time_patch,
                                                   coeff_patch))
    if cfg.uses_visual and visual is None:
        raise InputError(f"record {record.id}: variant {cfg.variant} requires visual sources")
    if cfg.uses_audio and audio is None:
        raise InputError(f"record {record.id}: variant {cfg.variant} requires audio sources")
    return SampleInputs(record.id, label_vector(record.labels, cfg.task, record.id),
                        visual, audio, visual_kind, audio_kind)


def load_dataset(records: list[SampleRecord], cfg: ModelConfig, base_dir: str,
                 mfcc_cfg: mfcc.MfccConfig | None = None,
                 preprocess: FramePreprocessSpec | None = None) -> list[SampleInputs]:
    cache: dict = {}
    return [load_sample_inputs(r, cfg, base_dir, mfcc_cfg, preprocess, cache) for r in records]


# ---------------------------------------------------------------------------
# synthetic planted-signal datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    mode: str                        # "xor" | "recency"
    n_segments: int = 10
    tokens_per_modality: int = 2
    latent_dim: int = 16
    noise: float = 0.25
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("xor", "recency"):
            raise InputError(f"unknown synthetic mode {self.mode!r}")
        if min(self.train_size, self.test_size, self.tokens_per_modality,
               self.latent_dim) < 1:
            raise InputError("synthetic sizes must be >= 1")
        if self.noise < 0:
            raise InputError("noise must be >= 0")
        if self.n_segments < 1 or (self.mode == "recency" and self.n_segments < 4):
            raise InputError("n_segments too small for the requested mode")


@dataclass
class SyntheticDataset:
    train_manifest: str
    test_manifest: str
    meta_path: str
    latents: dict[str, dict] = field(default_factory=dict)


def _unit_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Write train/test manifests plus per-sample token tensors.

    xor mode: audio tokens encode bit ``a``, visual tokens encode bit
    ``v`` (the same bit in every segment), label = a XOR v, so either
    modality alone carries zero label information. recency mode: bits are
    planted only at segments n-3 and n-1 (zero-based) and the label is
    their XOR; earlier segments are pure noise, and because the per-
    segment encoder is position-blind, a model that averages segments
    cannot separate the classes. Deterministic for a fixed seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    tokens_dir = os.path.join(out_dir, "tokens")
    os.makedirs(tokens_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    u_visual = _unit_direction(rng, spec.latent_dim)
    u_audio = _unit_direction(rng, spec.latent_dim)
    t, d, n = spec.tokens_per_modality, spec.latent_dim, spec.n_segments

    def noise_tokens():
        return spec.noise * rng.normal(size=(t, d))

    def signal_tokens(bit: int, direction: np.ndarray):
        return (2.0 * bit - 1.0) * direction + noise_tokens()

    latents: dict[str, dict] = {}

    def make_sample(split: str, index: int) -> tuple[SampleRecord, dict[str, np.ndarray]]:
        sample_id = f"{spec.mode}-{split}-{index:05d}"
        tensors: dict[str, np.ndarray] = {}
        if spec.mode == "xor":
            a = int(rng.integers(0, 2))
            v = int(rng.integers(0, 2))
            label = a ^ v
            latents[sample_id] = {"audio_bit": a, "visual_bit": v}
            for i in range(n):
                tensors[f"visual_{i}"] = signal_tokens(v, u_visual).astype(np.float32)
                tensors[f"audio_{i}"] = signal_tokens(a, u_audio).astype(np.float32)
        else:
            b1 = int(rng.integers(0, 2))
            b2 = int(rng.integers(0, 2))
            label = b1 ^ b2
            latents[sample_id] = {"early_bit": b1, "late_bit": b2,
                                  "early_segment": n - 3, "late_segment": n - 1}
            for i in range(n):
                if i == n - 3:
                    tensors[f"visual_{i}"] = signal_tokens(b1, u_visual).astype(np.float32)
                    tensors[f"audio_{i}"] = signal_tokens(b1, u_audio).astype(np.float32)
                elif i == n - 1:
                    tensors[f"visual_{i}"] = signal_tokens(b2, u_visual).astype(np.float32)
                    tensors[f"audio_{i}"] = signal_tokens(b2, u_audio).astype(np.float32)
                else:
                    tensors[f"visual_{i}"] = noise_tokens().astype(np.float32)
                    tensors[f"audio_{i}"] = noise_tokens().astype(np.float32)
        rel = os.path.join("tokens", f"{sample_id}.s2st")
        segments = [
            SegmentSource(
                visual_tokens=TokenSource(rel, f"visual_{i}"),
                audio_tokens=TokenSource(rel, f"audio_{i}"),
            )
            for i in range(n)
        ]
        record = SampleRecord(sample_id, {"label": float(label)}, segments, float(n))
        return record, tensors

    manifests = {}
    for split, size in (("train", spec.train_size), ("test", spec.test_size)):
        records = []
        for index in range(size):
            record, tensors = make_sample(split, index)
            tensorio.write_tensors(os.path.join(tokens_dir, f"{record.id}.s2st"), tensors)
            records.append(record)
        manifest_path = os.path.join(out_dir, f"{split}.jsonl")
        save_manifest(records, manifest_path)
        manifests[split] = manifest_path
    meta_path = os.path.join(out_dir, "meta.json")
    meta = {"spec": {k: getattr(spec, k) for k in (
        "mode", "n_segments", "tokens_per_modality", "latent_dim", "noise",
        "train_size", "test_size", "seed")}, "latents": latents}
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=None, separators=(",", ":"))
    return SyntheticDataset(manifests["train"], manifests["test"], meta_path, latents)
