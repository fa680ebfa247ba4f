"""WAV file IO: 16-bit PCM, mono, via the stdlib wave module."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import AsrlabError

__all__ = ["AudioFormatError", "read_wav", "write_wav"]


class AudioFormatError(AsrlabError):
    pass


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 WAV file as float64 samples in [-1, 1)."""
    try:
        handle = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    with handle:
        if handle.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {handle.getnchannels()} channels")
        if handle.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * handle.getsampwidth()}-bit")
        rate = handle.getframerate()
        raw = handle.readframes(handle.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples (clipped to [-1, 1]) as mono PCM16."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise AudioFormatError(f"expected a 1-D sample array, got shape {x.shape}")
    quantized = np.clip(np.rint(x * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(sample_rate)
        handle.writeframes(quantized.tobytes())
