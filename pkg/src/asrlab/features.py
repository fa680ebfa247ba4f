"""Log-mel spectrogram frontend.

Fixed recipe: centered frames via reflect padding, periodic Hann window,
power spectrum, triangular mel filterbank on the Slaney-style scale (linear
below 1 kHz, logarithmic above) with area normalization, then log10 with an
absolute floor. Digital silence maps to a uniform floor value, exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import AsrlabError

__all__ = [
    "MelConfig",
    "MelSpectrogram",
    "EmptyAudio",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "filter_center_frequencies",
    "frame_count",
    "log_mel",
    "pad_or_trim",
    "write_mel_dump",
    "read_mel_dump",
]

MEL_MAGIC = b"MELS"
MEL_DUMP_VERSION = 1


class EmptyAudio(AsrlabError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    window_length: int = 400
    hop_length: int = 160
    fft_size: int = 400
    mel_low_hz: float = 0.0
    mel_high_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if not (0 < self.hop_length <= self.window_length <= self.fft_size):
            raise ValueError("need 0 < hop_length <= window_length <= fft_size")
        if not (0 <= self.mel_low_hz < self.mel_high_hz):
            raise ValueError("need 0 <= mel_low_hz < mel_high_hz")
        if self.mel_high_hz > self.sample_rate / 2:
            raise ValueError("mel_high_hz cannot exceed the Nyquist frequency")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def floor_log10(self) -> float:
        return math.log10(self.log_floor)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, frames) float64, log10 power
    frame_rate: float
    source_duration: float
    floor_log10: float

    @property
    def frames(self) -> int:
        return int(self.values.shape[1])


# Slaney-style scale: linear spacing up to 1 kHz, logarithmic above, with the
# two regions meeting smoothly at (1000 Hz, 15 mel).
_LINEAR_HZ_PER_MEL = 200.0 / 3.0
_LOG_KNEE_HZ = 1000.0
_LOG_KNEE_MEL = _LOG_KNEE_HZ / _LINEAR_HZ_PER_MEL
_LOG_STEP = math.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / _LINEAR_HZ_PER_MEL
    above = hz >= _LOG_KNEE_HZ
    safe = np.where(above, hz, _LOG_KNEE_HZ)
    mel = np.where(above, _LOG_KNEE_MEL + np.log(safe / _LOG_KNEE_HZ) / _LOG_STEP, mel)
    return mel if mel.ndim else float(mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    hz = mel * _LINEAR_HZ_PER_MEL
    above = mel >= _LOG_KNEE_MEL
    safe = np.where(above, mel, _LOG_KNEE_MEL)
    hz = np.where(above, _LOG_KNEE_HZ * np.exp(_LOG_STEP * (safe - _LOG_KNEE_MEL)), hz)
    return hz if hz.ndim else float(hz)


def filter_center_frequencies(config: MelConfig = MelConfig()) -> np.ndarray:
    edges = np.linspace(
        hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz), config.n_mels + 2
    )
    return mel_to_hz(edges[1:-1])


def mel_filterbank(config: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular filters (n_mels, fft_size//2 + 1), area-normalized."""
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz), config.n_mels + 2)
    )
    bin_hz = np.arange(config.fft_size // 2 + 1) * config.sample_rate / config.fft_size
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    return weights


def frame_count(n_samples: int, config: MelConfig = MelConfig()) -> int:
    """Frames produced for n_samples of audio, including the centering pad."""
    padded = n_samples + 2 * (config.window_length // 2)
    if padded < config.window_length:
        return 0
    return 1 + (padded - config.window_length) // config.hop_length


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect padding that also handles inputs shorter than the pad width."""
    n = x.size
    if pad == 0:
        return x
    if n == 1:
        return np.full(n + 2 * pad, x[0], dtype=x.dtype)
    idx = np.arange(-pad, n + pad)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    idx = np.where(idx >= n, period - idx, idx)
    return x[idx]


def log_mel(samples: np.ndarray, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """Compute the log10 mel power spectrogram of a mono waveform."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected mono 1-D samples, got shape {x.shape}")
    if x.size == 0:
        raise EmptyAudio("cannot compute features of empty audio")
    pad = config.window_length // 2
    padded = _reflect_pad(x, pad)
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.window_length)
    frames = frames[:: config.hop_length]

    k = np.arange(config.window_length, dtype=np.float64)
    window = 0.5 - 0.5 * np.cos(2.0 * math.pi * k / config.window_length)

    spectrum = np.fft.rfft(frames * window, n=config.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = mel_filterbank(config) @ power.T
    values = np.log10(np.maximum(mel_power, config.log_floor))
    return MelSpectrogram(
        values=values,
        frame_rate=config.frame_rate,
        source_duration=x.size / config.sample_rate,
        floor_log10=config.floor_log10,
    )


def pad_or_trim(mel: MelSpectrogram, target_frames: int) -> MelSpectrogram:
    """Right-pad with the floor value, or cut, to exactly target_frames."""
    if target_frames < 0:
        raise ValueError("target_frames must be non-negative")
    values = mel.values
    have = values.shape[1]
    if have > target_frames:
        values = values[:, :target_frames]
    elif have < target_frames:
        fill = np.full((values.shape[0], target_frames - have), mel.floor_log10)
        values = np.concatenate([values, fill], axis=1)
    else:
        values = values.copy()
    return MelSpectrogram(values, mel.frame_rate, mel.source_duration, mel.floor_log10)


def write_mel_dump(path: str | Path, mel: MelSpectrogram, config: MelConfig) -> None:
    """Binary dump: magic, version, JSON header, float32 little-endian values."""
    header = {
        "config": asdict(config),
        "frame_rate": mel.frame_rate,
        "source_duration": mel.source_duration,
        "floor_log10": mel.floor_log10,
        "n_mels": int(mel.values.shape[0]),
        "frames": int(mel.values.shape[1]),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(mel.values, dtype="<f4").tobytes()
    with open(path, "wb") as handle:
        handle.write(MEL_MAGIC)
        handle.write(struct.pack("<I", MEL_DUMP_VERSION))
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        handle.write(payload)


def read_mel_dump(path: str | Path) -> tuple[MelSpectrogram, MelConfig]:
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != MEL_MAGIC:
            raise AsrlabError(f"{path}: not a mel dump (bad magic {magic!r})")
        version = struct.unpack("<I", handle.read(4))[0]
        if version != MEL_DUMP_VERSION:
            raise AsrlabError(f"{path}: unsupported mel dump version {version}")
        header_len = struct.unpack("<I", handle.read(4))[0]
        header = json.loads(handle.read(header_len).decode("utf-8"))
        count = header["n_mels"] * header["frames"]
        data = np.frombuffer(handle.read(4 * count), dtype="<f4").astype(np.float64)
    values = data.reshape(header["n_mels"], header["frames"])
    config = MelConfig(**header["config"])
    mel = MelSpectrogram(
        values=values,
        frame_rate=header["frame_rate"],
        source_duration=header["source_duration"],
        floor_log10=header["floor_log10"],
    )
    return mel, config
