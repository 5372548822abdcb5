"""Thin media adapters: PPM/PNG frames and PCM/WAV audio.

PPM P6 is the mandatory bit-exact image path; PNG decoding is delegated
to Pillow when available. Audio enters either as headerless PCM (64-bit
floats or 16-bit signed integers, little-endian) at a declared sample
rate, or as a WAV container restricted to PCM-16 mono.
"""

from __future__ import annotations

import wave

import numpy as np

from .exceptions import FormatError, InputError, UnsupportedFormatError

PCM_FORMATS = ("f64", "i16")


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into (height, width, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise UnsupportedFormatError(f"{path}: not a P6 PPM")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed PPM header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only maxval 255 PPM is supported")
    expected = width * height * 3
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InputError(f"write_ppm expects (h, w, 3) uint8, got {image.shape} {image.dtype}")
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise UnsupportedFormatError(
            f"{path}: PNG support requires Pillow (pip install avaffect[png])"
        ) from exc
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_frame(path) -> np.ndarray:
    name = str(path).lower()
    if name.endswith(".ppm"):
        return read_ppm(path)
    if name.endswith(".png"):
        return read_png(path)
    raise UnsupportedFormatError(f"{path}: only PPM and PNG frames are supported")


def read_pcm(path, fmt: str) -> np.ndarray:
    """Headerless mono PCM: 'f64' floats or 'i16' ints, little-endian."""
    if fmt not in PCM_FORMATS:
        raise UnsupportedFormatError(f"unknown PCM format {fmt!r}; expected one of {PCM_FORMATS}")
    raw = np.fromfile(path, dtype="<f8" if fmt == "f64" else "<i2")
    if raw.size == 0:
        raise InputError(f"{path}: empty PCM stream")
    if fmt == "i16":
        return raw.astype(np.float64) / 32768.0
    return raw.astype(np.float64)


def read_wav(path) -> tuple[np.ndarray, int]:
    """PCM-16 mono WAV only; returns (samples in [-1, 1), sample_rate)."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise UnsupportedFormatError(f"{path}: compressed WAV is not supported")
            if wf.getnchannels() != 1:
                raise UnsupportedFormatError(f"{path}: only mono WAV is supported")
            if wf.getsampwidth() != 2:
                raise UnsupportedFormatError(f"{path}: only 16-bit PCM WAV is supported")
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from exc
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    ints = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(ints.tobytes())
