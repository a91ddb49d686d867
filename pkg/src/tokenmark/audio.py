"""Waveform <-> (magnitude, phase) spectrogram conversion and frame masks.

Framing is center-padded (reflect) and truncated to ``ceil(N / hop)`` frames,
so one second at 24 kHz with hop 80 gives exactly 300 frames.  The torch
functions are differentiable and are what the models train through; the
numpy-facing wrappers return plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_SAMPLE_RATE = 24000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 400
    hop: int = 80
    win_length: int = 400
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length <= self.n_fft:
            raise ValueError("need 0 < hop <= win_length <= n_fft")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        # Hann overlap-add is only constant when hop divides the window length
        if self.win_length % self.hop:
            raise ValueError("hann window requires hop to divide win_length")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop)

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop": self.hop, "win_length": self.win_length,
                "window": self.window}


@dataclass
class Spectrogram:
    magnitude: np.ndarray  # T x F
    phase: np.ndarray  # T x F
    config: StftConfig = field(default_factory=StftConfig)
    n_samples: int | None = None

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape or self.magnitude.ndim != 2:
            raise ValueError("magnitude and phase must be matching T x F matrices")
        if self.magnitude.shape[1] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency bins, got {self.magnitude.shape[1]}")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]


@dataclass
class FrameMask:
    flags: np.ndarray
    ratio: float

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def __len__(self):
        return self.flags.size

    @classmethod
    def from_positions(cls, positions, n_frames: int) -> "FrameMask":
        flags = np.zeros(n_frames, dtype=bool)
        flags[np.asarray(positions, dtype=int)] = True
        return cls(flags, flags.sum() / n_frames)


def _window(cfg: StftConfig, dtype, device=None) -> torch.Tensor:
    win = torch.hann_window(cfg.win_length, periodic=True, dtype=dtype, device=device)
    left = (cfg.n_fft - cfg.win_length) // 2
    return torch.nn.functional.pad(win, (left, cfg.n_fft - cfg.win_length - left))


def stft_torch(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Complex STFT of ``x`` (..., N) -> (..., T, F), T = ceil(N / hop)."""
    n = x.shape[-1]
    if n < cfg.win_length:
        raise ValueError("signal too short")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, n)
    pad = cfg.n_fft // 2
    padded = torch.nn.functional.pad(flat, (pad, pad), mode="reflect").squeeze(1)
    frames = padded.unfold(-1, cfg.n_fft, cfg.hop)[:, : cfg.n_frames(n)]
    spec = torch.fft.rfft(frames * _window(cfg, x.dtype, x.device), dim=-1)
    return spec.reshape(*lead, spec.shape[-2], spec.shape[-1])


def istft_torch(magnitude: torch.Tensor, phase: torch.Tensor, cfg: StftConfig,
                length: int) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft_torch`."""
    if magnitude.shape != phase.shape or magnitude.shape[-1] != cfg.n_freq:
        raise ValueError("spectrogram shape inconsistent with StftConfig")
    t = magnitude.shape[-2]
    if t != cfg.n_frames(length):
        raise ValueError(f"{t} frames cannot describe a {length}-sample signal")
    lead = magnitude.shape[:-2]
    spec = torch.polar(magnitude, phase).reshape(-1, t, cfg.n_freq)
    win = _window(cfg, magnitude.dtype, magnitude.device)
    frames = torch.fft.irfft(spec, n=cfg.n_fft, dim=-1) * win
    total = (t - 1) * cfg.hop + cfg.n_fft
    fold = dict(output_size=(1, total), kernel_size=(1, cfg.n_fft), stride=(1, cfg.hop))
    out = torch.nn.functional.fold(frames.transpose(1, 2), **fold).reshape(-1, total)
    env = torch.nn.functional.fold(
        (win * win).expand(1, t, -1).transpose(1, 2), **fold).reshape(total)
    pad = cfg.n_fft // 2
    out = out[:, pad: pad + length]
    env = env[pad: pad + length]
    out = out / torch.where(env > 1e-11, env, torch.ones_like(env))
    return out.reshape(*lead, length)


def stft(wave: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    spec = stft_torch(torch.from_numpy(wave.samples), cfg).numpy()
    phase = np.angle(spec)
    phase[phase <= -np.pi] += 2 * np.pi
    return Spectrogram(np.abs(spec), phase, cfg, n_samples=len(wave))


def istft(spec: Spectrogram, sample_rate: int = DEFAULT_SAMPLE_RATE,
          length: int | None = None) -> Waveform:
    length = length or spec.n_samples or spec.n_frames * spec.config.hop
    out = istft_torch(torch.as_tensor(spec.magnitude, dtype=torch.float64),
                      torch.as_tensor(spec.phase, dtype=torch.float64),
                      spec.config, length)
    return Waveform(out.numpy(), sample_rate)


def mask_count(n_frames: int, gamma: float) -> int:
    """``round(gamma * T)`` with halves rounded up."""
    return int(math.floor(gamma * n_frames + 0.5 + 1e-9))


def sample_mask(n_frames: int, gamma: float, seed: int | np.random.Generator) -> FrameMask:
    """Scattered frame mask with exactly ``round(gamma * T)`` frames set."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if not 0 < gamma <= 0.5:
        raise ValueError("mask ratio gamma must lie in (0, 0.5]")
    rng = np.random.default_rng(seed)
    flags = np.zeros(n_frames, dtype=bool)
    flags[rng.choice(n_frames, mask_count(n_frames, gamma), replace=False)] = True
    return FrameMask(flags, gamma)


def load_wav(path, target_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a mono WAV file; resample to ``target_rate`` unless it is None."""
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        raise ValueError("only mono WAV files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if target_rate and rate != target_rate:
        g = math.gcd(rate, target_rate)
        samples = resample_poly(samples, target_rate // g, rate // g, window=("kaiser", 5.0))
        rate = target_rate
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def save_wav(path, wave: Waveform) -> None:
    """Write 16-bit PCM.  Samples are clipped to [-1, 1) first."""
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wave.sample_rate, pcm)


def quantize_pcm16(wave: Waveform) -> Waveform:
    """Snap samples to the 16-bit grid so a save/load round trip is lossless."""
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767)
    return Waveform(pcm / 32768.0, wave.sample_rate)
