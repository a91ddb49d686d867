"""Bundled speech-like signal generator and WAV folder loading.

The generator produces source-filter signals: a harmonic glottal excitation
with a drifting pitch, shaped by a few formant resonators, alternating with
fricative-like noise bursts and pauses.  It is enough to give the codebook
and the manipulator real temporal structure without downloading a dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter, butter, sosfilt

from .audio import DEFAULT_SAMPLE_RATE, Waveform, load_wav


def _resonator(freq, bandwidth, sr):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def _voiced(n, sr, rng):
    f0_start, f0_end = rng.uniform(90, 240, size=2)
    f0 = np.linspace(f0_start, f0_end, n) * (1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 7) * np.arange(n) / sr))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(0.45 * sr / f0.max())
    h = np.arange(1, n_harm + 1)
    tilt = h ** -rng.uniform(0.8, 1.4)
    x = np.sin(np.outer(phase, h) + rng.uniform(0, 2 * np.pi, n_harm)) @ tilt
    out = np.zeros(n)
    for lo, hi, bw in ((250, 900, 80), (850, 2400, 120), (2200, 3600, 180)):
        b, a = _resonator(rng.uniform(lo, hi), bw, sr)
        out += lfilter(b, a, x) * rng.uniform(0.5, 1.0)
    return out


def _unvoiced(n, sr, rng):
    lo = rng.uniform(1500, 4000)
    hi = min(lo + rng.uniform(1500, 5000), 0.45 * sr)
    sos = butter(4, [lo, hi], btype="band", fs=sr, output="sos")
    return sosfilt(sos, rng.standard_normal(n))


def synth_speech(duration: float = 1.0, sample_rate: int = DEFAULT_SAMPLE_RATE,
                 seed=0) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    fade = int(0.01 * sample_rate)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.06, 0.3) * sample_rate)
        kind = rng.choice(3, p=[0.6, 0.25, 0.15])
        if kind < 2:
            x = _voiced(seg, sample_rate, rng) if kind == 0 else _unvoiced(seg, sample_rate, rng)
            x /= np.abs(x).max() + 1e-12
            env = np.ones(seg)
            ramp = np.sin(np.linspace(0, np.pi / 2, min(fade, seg // 2))) ** 2
            env[: ramp.size] = ramp
            env[seg - ramp.size:] = ramp[::-1]
            end = min(pos + seg, n)
            out[pos:end] += (x * env * rng.uniform(0.3, 1.0))[: end - pos]
        pos += seg
    out += 1e-3 * rng.standard_normal(n)
    out *= rng.uniform(0.3, 0.8) / (np.abs(out).max() + 1e-12)
    return Waveform(out, sample_rate)


def synthetic_corpus(n_clips: int, duration: float = 1.0, seed=0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Waveform]:
    return [synth_speech(duration, sample_rate, seed=[seed, i]) for i in range(n_clips)]


def load_corpus(folder, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Waveform]:
    paths = sorted(Path(folder).glob("**/*.wav"))
    if not paths:
        raise ValueError(f"no .wav files under {folder}")
    return [load_wav(p, sample_rate) for p in paths]
