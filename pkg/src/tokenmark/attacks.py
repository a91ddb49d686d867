"""Signal distortions used for robustness training and evaluation.

Every kind is a pure function of ``(samples, DistortionSpec)``.  The torch entry
point :func:`distort` keeps gradients for GN, AS, LP, MF, EA, QTZ (straight
through), SS and PN; RS and MP3 run through scipy / an external codec and come
back detached.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile
from scipy.signal import butter, resample_poly, sosfilt

from .audio import Waveform

KINDS = ("GN", "AS", "RS", "MP3", "MF", "LP", "EA", "QTZ", "SS", "PN", "NONE")
EVAL_KINDS = ("NONE", "GN", "AS", "RS", "MP3", "MF", "LP", "EA")
DIFFERENTIABLE = frozenset({"GN", "AS", "LP", "MF", "EA", "QTZ", "SS", "PN", "NONE"})


class CodecUnavailable(RuntimeError):
    """Raised when the external MP3 encoder/decoder cannot be used."""


@dataclass
class DistortionSpec:
    kind: str = "NONE"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")

    def resolved(self) -> "DistortionSpec":
        """Fill in any randomly drawn parameter from ``seed``."""
        rng = np.random.default_rng([self.seed, KINDS.index(self.kind)])
        p = dict(self.params)
        if self.kind == "GN":
            p.setdefault("snr_db", float(rng.uniform(20.0, 40.0)))
        elif self.kind == "AS":
            p.setdefault("scale", 0.9)
        elif self.kind == "RS":
            p.setdefault("factor", float(rng.choice([2.0, 0.5])))
        elif self.kind == "MP3":
            p.setdefault("bitrate_kbps", 64)
        elif self.kind == "MF":
            p.setdefault("kernel", 3)
        elif self.kind == "LP":
            p.setdefault("cutoff_hz", 5000.0)
            p.setdefault("order", 6)
        elif self.kind == "EA":
            p.setdefault("attenuation", float(rng.uniform(0.1, 0.3)))
            p.setdefault("delay_ms", float(rng.uniform(100.0, 300.0)))
        elif self.kind == "QTZ":
            p.setdefault("levels", 256)
        elif self.kind == "SS":
            p.setdefault("fraction", 0.001)
        elif self.kind == "PN":
            p.setdefault("ratio", 0.1)
        _check_params(self.kind, p)
        return DistortionSpec(self.kind, p, self.seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def _check_params(kind, p):
    if kind == "GN" and not 20.0 <= p["snr_db"] <= 40.0:
        raise ValueError("GN snr_db must be in [20, 40]")
    if kind == "RS" and p["factor"] not in (2.0, 0.5):
        raise ValueError("RS factor must be 2 or 0.5")
    if kind == "EA" and not (0.1 <= p["attenuation"] <= 0.3 and 100.0 <= p["delay_ms"] <= 300.0):
        raise ValueError("EA attenuation must be in [0.1, 0.3] and delay in [100, 300] ms")
    if kind == "MF" and p["kernel"] % 2 == 0:
        raise ValueError("MF kernel must be odd")


def _noise_rng(spec: DistortionSpec, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, KINDS.index(spec.kind), 1000 + salt])


def _rms(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True))


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise with a 1/f power spectrum (equal energy per octave)."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x / np.sqrt(np.mean(x * x))


@lru_cache(maxsize=16)
def lowpass_impulse_response(cutoff_hz: float, sample_rate: int, order: int = 6,
                             n_taps: int = 2048) -> np.ndarray:
    """Causal Butterworth impulse response, truncated where it has decayed below 1e-12."""
    sos = butter(order, cutoff_hz, btype="low", fs=sample_rate, output="sos")
    impulse = np.zeros(n_taps)
    impulse[0] = 1.0
    return sosfilt(sos, impulse)


def _fft_convolve(x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(n + h.shape[-1])))
    y = torch.fft.irfft(torch.fft.rfft(x, size) * torch.fft.rfft(h, size), size)
    return y[..., :n]


def _resample(x: np.ndarray, factor: float) -> np.ndarray:
    up, down = (2, 1) if factor == 2.0 else (1, 2)
    y = resample_poly(resample_poly(x, up, down, axis=-1, window=("kaiser", 5.0)),
                      down, up, axis=-1, window=("kaiser", 5.0))
    return _fit_length(y, x.shape[-1])


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if y.shape[-1] >= n:
        return y[..., :n]
    return np.pad(y, [(0, 0)] * (y.ndim - 1) + [(0, n - y.shape[-1])])


# external codec hook ---------------------------------------------------------

_mp3_codec = None


def set_mp3_codec(fn) -> None:
    """Install ``fn(samples: np.ndarray, sample_rate: int, bitrate_kbps: int) -> np.ndarray``.

    Pass None to restore the ffmpeg subprocess default.
    """
    global _mp3_codec
    _mp3_codec = fn


def ffmpeg_mp3_roundtrip(samples: np.ndarray, sample_rate: int, bitrate_kbps: int = 64):
    exe = shutil.which("ffmpeg")
    if exe is None:
        raise CodecUnavailable("ffmpeg not found on PATH; install it or call set_mp3_codec")
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    with tempfile.TemporaryDirectory() as tmp:
        src, mp3, dst = (Path(tmp) / n for n in ("in.wav", "mid.mp3", "out.wav"))
        wavfile.write(src, sample_rate, pcm)
        for cmd in ([exe, "-y", "-loglevel", "error", "-i", str(src), "-b:a", f"{bitrate_kbps}k", str(mp3)],
                    [exe, "-y", "-loglevel", "error", "-i", str(mp3), "-ar", str(sample_rate),
                     "-ac", "1", str(dst)]):
            res = subprocess.run(cmd, capture_output=True)
            if res.returncode:
                raise CodecUnavailable(res.stderr.decode(errors="replace").strip())
        rate, out = wavfile.read(dst)
    return out.astype(np.float64) / 32768.0


def mp3_roundtrip(samples: np.ndarray, sample_rate: int, bitrate_kbps: int = 64) -> np.ndarray:
    codec = _mp3_codec or ffmpeg_mp3_roundtrip
    return _fit_length(np.asarray(codec(samples, sample_rate, bitrate_kbps)), samples.shape[-1])


# core ------------------------------------------------------------------------

def distort(x: torch.Tensor, spec: DistortionSpec, sample_rate: int = 24000) -> torch.Tensor:
    """Apply ``spec`` to ``x`` of shape (N,) or (B, N); output has the same shape.

    Batched input shares the spec's randomness across rows except for noise,
    which is drawn independently per row.
    """
    spec = spec.resolved()
    p, kind = spec.params, spec.kind
    squeeze = x.ndim == 1
    x2 = x.reshape(1, -1) if squeeze else x
    b, n = x2.shape

    if kind == "NONE":
        y = x2
    elif kind == "AS":
        y = x2 * p["scale"]
    elif kind == "GN":
        noise = torch.as_tensor(_noise_rng(spec).standard_normal((b, n)), dtype=x.dtype)
        noise = noise / _rms(noise)
        # exact target SNR against the realized noise
        y = x2 + noise * _rms(x2) * 10 ** (-p["snr_db"] / 20)
    elif kind == "PN":
        rng = _noise_rng(spec)
        noise = torch.as_tensor(np.stack([pink_noise(n, rng) for _ in range(b)]), dtype=x.dtype)
        y = x2 + noise * _rms(x2).detach() * p["ratio"]
    elif kind == "MF":
        k = p["kernel"]
        padded = F.pad(x2[:, None], (k // 2, k // 2), mode="replicate")[:, 0]
        y = padded.unfold(-1, k, 1).median(dim=-1).values
    elif kind == "LP":
        h = torch.as_tensor(lowpass_impulse_response(float(p["cutoff_hz"]), sample_rate,
                                                     int(p["order"])), dtype=x.dtype)
        y = _fft_convolve(x2, h)
    elif kind == "EA":
        d = int(round(p["delay_ms"] * sample_rate / 1000.0))
        echo = F.pad(x2, (d, 0))[:, :n] if d < n else torch.zeros_like(x2)
        y = torch.clamp(x2 + p["attenuation"] * echo, -1.0, 1.0)
    elif kind == "QTZ":
        half = (p["levels"] - 1) / 2.0
        q = torch.round((torch.clamp(x2, -1.0, 1.0) + 1.0) * half) / half - 1.0
        y = x2 + (q - x2).detach()
    elif kind == "SS":
        count = int(np.floor(p["fraction"] * n + 0.5))
        rng = _noise_rng(spec)
        keep = torch.ones(b, n, dtype=x.dtype)
        for row in range(b):
            keep[row, rng.choice(n, count, replace=False)] = 0.0
        y = x2 * keep
    elif kind == "RS":
        y = torch.as_tensor(_resample(x2.detach().cpu().numpy(), p["factor"]), dtype=x.dtype)
    elif kind == "MP3":
        arr = x2.detach().cpu().numpy()
        y = torch.as_tensor(np.stack([mp3_roundtrip(r, sample_rate, p["bitrate_kbps"]) for r in arr]),
                            dtype=x.dtype)
    else:  # pragma: no cover - guarded by DistortionSpec
        raise ValueError(kind)
    return y.reshape(n) if squeeze else y


def apply(wave: Waveform, spec: DistortionSpec) -> Waveform:
    y = distort(torch.from_numpy(wave.samples), spec, wave.sample_rate)
    return Waveform(y.numpy(), wave.sample_rate)


def random_spec(catalog, seed) -> DistortionSpec:
    catalog = list(catalog)
    if not catalog:
        raise ValueError("distortion catalog is empty")
    rng = np.random.default_rng(seed)
    kind = catalog[int(rng.integers(len(catalog)))]
    return DistortionSpec(kind, seed=int(rng.integers(2**31))).resolved()


def random_attack(wave: Waveform, catalog, seed) -> tuple[Waveform, DistortionSpec]:
    spec = random_spec(catalog, seed)
    return apply(wave, spec), spec
