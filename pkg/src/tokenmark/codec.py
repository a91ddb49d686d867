"""Embedding bits in token parities and reading them back from audio.

Bit ``i`` of the payload lives at the ``i``-th watermark position in ascending
frame order; the detector reads detected frames in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import FrameMask, Waveform, istft_torch, mask_count, stft
from .manipulator import predict_masked, sample_parity_token
from .model import WatermarkModel
from .vq import CodeSequence
from .stats import DetectorCalibration

MAX_RATIO = 0.5
MAX_SPACING = 3


class CapacityExceeded(ValueError):
    pass


def capacity(n_frames: int) -> int:
    """Largest payload a clip of ``n_frames`` frames can carry."""
    return int(np.floor(MAX_RATIO * n_frames))


def parse_bits(text: str) -> np.ndarray:
    """'0101...' or '0x'-prefixed hex (4 bits per digit, MSB first)."""
    text = text.strip()
    if text.lower().startswith("0x"):
        digits = text[2:]
        if not digits:
            raise ValueError("empty hex payload")
        text = "".join(f"{int(c, 16):04b}" for c in digits)
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"bits must be a 0/1 string or 0x-prefixed hex, got {text!r}")
    return np.array([int(c) for c in text], dtype=np.int64)


def format_bits(bits) -> str:
    return "".join(str(int(b)) for b in bits)


@dataclass
class WatermarkPlan:
    bits: np.ndarray
    positions: np.ndarray
    n_frames: int
    original_ids: np.ndarray | None = None
    watermarked_ids: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.bits.size < 1:
            raise ValueError("payload must hold at least one bit")
        if self.bits.size != self.positions.size:
            raise ValueError("need exactly one position per bit")
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")
        if self.positions[0] < 0 or self.positions[-1] >= self.n_frames:
            raise ValueError("positions out of range")
        if self.bits.size > capacity(self.n_frames):
            raise CapacityExceeded(
                f"capacity exceeded: {self.bits.size} bits > {capacity(self.n_frames)} for "
                f"{self.n_frames} frames")

    @property
    def ratio(self) -> float:
        return self.bits.size / self.n_frames

    @property
    def mask(self) -> FrameMask:
        return FrameMask.from_positions(self.positions, self.n_frames)

    def to_dict(self) -> dict:
        d = {"bits": format_bits(self.bits), "positions": self.positions.tolist(),
             "n_frames": self.n_frames, "ratio": self.ratio}
        if self.original_ids is not None:
            d["original_ids"] = self.original_ids.tolist()
            d["watermarked_ids"] = self.watermarked_ids.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "WatermarkPlan":
        ids = {k: np.asarray(d[k]) for k in ("original_ids", "watermarked_ids") if k in d}
        return cls(parse_bits(d["bits"]), np.asarray(d["positions"]), d["n_frames"], **ids)


def position_spacing(n_frames: int, n_bits: int) -> int:
    """Minimum gap between watermark positions, shared by embedder and detector.

    Overlapping STFT windows leak a regenerated frame into its neighbours, so the
    localizer peak can land one frame off.  Keeping positions apart lets the
    detector pick peaks instead of adjacent high scores.
    """
    if n_bits < 1:
        return 1
    return int(max(1, min(MAX_SPACING, n_frames // n_bits)))


def choose_positions(n_frames: int, n_bits: int, seed) -> np.ndarray:
    """Uniform random sorted positions, at least :func:`position_spacing` apart."""
    if n_bits > capacity(n_frames):
        raise CapacityExceeded(
            f"capacity exceeded: {n_bits} bits > {capacity(n_frames)} for {n_frames} frames")
    rng = np.random.default_rng(seed)
    gap = position_spacing(n_frames, n_bits)
    # stars and bars: a uniform draw from the shrunken range, then stretched
    free = n_frames - (gap - 1) * max(n_bits - 1, 0)
    return np.sort(rng.choice(free, n_bits, replace=False)) + (gap - 1) * np.arange(n_bits)


def smooth_scores(scores, radius: int) -> np.ndarray:
    """Triangular smoothing.  A regenerated frame lifts both neighbours, so its
    smoothed score beats a neighbour that happens to score slightly higher."""
    scores = np.asarray(scores, dtype=np.float64)
    if radius < 1:
        return scores
    kernel = 1.0 - np.abs(np.arange(-radius, radius + 1)) / (radius + 1)
    return np.convolve(scores, kernel, mode="same")


def pick_peaks(scores, n: int, radius: int) -> np.ndarray:
    """Greedy non-maximum suppression; falls back to plain ranking if peaks run out."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    taken, blocked = [], np.zeros(len(order), dtype=bool)
    for i in order:
        if len(taken) == n:
            break
        if not blocked[i]:
            taken.append(i)
            blocked[max(0, i - radius): i + radius + 1] = True
    chosen = set(taken)
    rest = [i for i in order if i not in chosen]
    return np.sort(np.array(taken + rest[: n - len(taken)], dtype=np.int64))


def substitute_tokens(ids, positions, bits, logits=None, selector="manipulator",
                      mode="argmax", seed=None, codebook_size=None) -> np.ndarray:
    """Force ``ids[positions[i]] % 2 == bits[i]``; matching tokens are kept as they are.

    ``selector`` is ``manipulator`` (needs ``logits``, T x K) or ``random``
    (uniform over ids of the required parity, needs ``logits`` or ``codebook_size``).
    """
    out = np.array(ids, dtype=np.int64, copy=True)
    k = logits.shape[1] if logits is not None else codebook_size
    if selector == "random" and k is None:
        raise ValueError("random selector needs the codebook size")
    rng = np.random.default_rng(seed)
    for t, b in zip(positions, bits):
        if out[t] % 2 == b:
            continue
        if selector == "manipulator":
            out[t] = sample_parity_token(logits[t], int(b), mode, seed=rng)
        elif selector == "random":
            out[t] = int(rng.choice(np.arange(b, k, 2)))
        else:
            raise ValueError(f"unknown selector {selector!r}")
    return out


def read_parity(ids, positions) -> np.ndarray:
    """Oracle readout: bit = token id parity at each position."""
    return np.asarray(ids, dtype=np.int64)[np.asarray(positions, dtype=np.int64)] % 2


@dataclass
class EmbedResult:
    wave: Waveform
    plan: WatermarkPlan
    magnitude: np.ndarray  # watermarked magnitude, T x F
    original_magnitude: np.ndarray


def _tiled(bits, n):
    reps = -(-n // bits.size)
    return np.tile(bits, reps)[:n]


@torch.no_grad()
def embed(wave: Waveform, bits, model: WatermarkModel, positions=None, ratio=None, seed=0,
          selector="manipulator", mode="argmax") -> EmbedResult:
    """Hide ``bits`` in ``wave``.

    Positions come from ``positions``, else ``round(ratio * T)`` random frames
    (payload tiled cyclically to fill them), else ``len(bits)`` random frames.
    """
    model.require(stage2=selector == "manipulator")
    bits = np.asarray(bits, dtype=np.int64)
    if bits.size < 1:
        raise ValueError("payload must hold at least one bit")
    spec = stft(wave, model.stft_cfg)
    T = spec.n_frames
    if positions is None:
        n = bits.size
        if ratio is not None:
            n = mask_count(T, ratio)
            if n < bits.size:
                raise CapacityExceeded(f"ratio {ratio} gives {n} frames for {bits.size} bits")
            bits = _tiled(bits, n)
        positions = choose_positions(T, n, seed)
    plan = WatermarkPlan(bits, np.asarray(positions), T)

    mag64 = torch.from_numpy(spec.magnitude)
    mag = mag64.float()[None]
    ids = model.vq.tokenize(mag).ids[0].numpy()
    logits = None
    if selector == "manipulator":
        logits = predict_masked(model.manipulator, ids, plan.mask.flags).logits
    new_ids = substitute_tokens(ids, plan.positions, plan.bits, logits, selector, mode, seed,
                                codebook_size=model.vq_cfg.codebook_size)
    plan.original_ids, plan.watermarked_ids = ids, new_ids

    mask = torch.from_numpy(plan.mask.flags)
    new_t = torch.from_numpy(new_ids)[None]
    decoded = model.vq.masked_decode(CodeSequence(new_t, model.vq.lookup(new_t)), mag,
                                     mask[None])[0].double()
    # unmasked frames keep the exact float64 input magnitude
    out_mag = torch.where(mask[:, None], decoded, mag64)
    y = istft_torch(out_mag, torch.from_numpy(spec.phase), model.stft_cfg, len(wave))
    return EmbedResult(Waveform(np.clip(y.numpy(), -1.0, 1.0), wave.sample_rate), plan,
                       out_mag.numpy(), spec.magnitude)


@torch.no_grad()
def reconstruct_frames(wave: Waveform, model: WatermarkModel, ratio=0.1, seed=0):
    """Regenerate a random fraction of frames from their own tokens (detection-only mark)."""
    model.require()
    spec = stft(wave, model.stft_cfg)
    T = spec.n_frames
    n = mask_count(T, ratio)
    if n > capacity(T):
        raise CapacityExceeded(f"ratio {ratio} exceeds the 0.5 maximum")
    mask_np = np.zeros(T, dtype=bool)
    if n:
        mask_np[choose_positions(T, n, seed)] = True
    mag64 = torch.from_numpy(spec.magnitude)
    mask = torch.from_numpy(mask_np)
    codes = model.vq.tokenize(mag64.float()[None])
    decoded = model.vq.masked_decode(codes, mag64.float()[None], mask[None])[0].double()
    out_mag = torch.where(mask[:, None], decoded, mag64)
    y = istft_torch(out_mag, torch.from_numpy(spec.phase), model.stft_cfg, len(wave))
    return Waveform(np.clip(y.numpy(), -1.0, 1.0), wave.sample_rate), mask_np


@dataclass
class LocalizerOutput:
    scores: np.ndarray
    threshold: float = 0.5

    @property
    def detected(self) -> np.ndarray:
        return np.flatnonzero(self.scores > self.threshold)


@dataclass
class RestorerOutput:
    parity_probs: np.ndarray


@dataclass
class DetectionResult:
    localizer: LocalizerOutput
    restorer: RestorerOutput
    bits: np.ndarray  # read over raw detections
    confidences: np.ndarray
    aligned_positions: np.ndarray | None = None
    aligned_bits: np.ndarray | None = None
    alignment: str = "none"  # none | exact | truncated | padded
    diagnostics: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.localizer.detected.size)

    @property
    def n_frames(self) -> int:
        return int(self.localizer.scores.size)

    def to_dict(self) -> dict:
        d = {"n_frames": self.n_frames, "detected": self.localizer.detected.tolist(),
             "bits": format_bits(self.bits), "confidences": np.round(self.confidences, 6).tolist(),
             "alignment": self.alignment, "diagnostics": self.diagnostics}
        if self.aligned_bits is not None:
            d["aligned_positions"] = self.aligned_positions.tolist()
            d["aligned_bits"] = format_bits(self.aligned_bits)
        return d


def localizer_forward(model: WatermarkModel, magnitude) -> LocalizerOutput:
    with torch.no_grad():
        s = torch.sigmoid(model.localizer(torch.as_tensor(magnitude, dtype=torch.float32)[None]))[0]
    return LocalizerOutput(s.double().numpy())


def restorer_forward(model: WatermarkModel, magnitude) -> RestorerOutput:
    with torch.no_grad():
        p = torch.sigmoid(model.restorer(torch.as_tensor(magnitude, dtype=torch.float32)[None]))[0]
    return RestorerOutput(p.double().numpy())


def decode_scores(loc: LocalizerOutput, res: RestorerOutput,
                  expected_length: int | None = None) -> DetectionResult:
    detected = loc.detected
    probs = res.parity_probs
    bits = (probs[detected] > 0.5).astype(np.int64)
    conf = np.abs(probs[detected] - 0.5) * 2
    result = DetectionResult(loc, res, bits, conf)
    if expected_length is None:
        return result
    if expected_length < 1:
        raise ValueError("expected_length must be positive")
    n = detected.size
    # best-effort alignment: the expected_length strongest peaks of the smoothed scores
    T = loc.scores.size
    L = min(expected_length, T)
    gap = position_spacing(T, L)
    # the smoothing window never spans two positions; suppression keeps peaks gap apart
    aligned = pick_peaks(smooth_scores(loc.scores, (gap - 1) // 2), L, gap // 2)
    result.aligned_positions = aligned
    result.aligned_bits = (probs[aligned] > 0.5).astype(np.int64)
    result.alignment = "exact" if n == expected_length else ("truncated" if n > expected_length else "padded")
    result.diagnostics = {"expected_length": int(expected_length), "raw_count": int(n),
                          "count_mismatch": int(n - expected_length)}
    return result


def detect(wave: Waveform, model: WatermarkModel, expected_length: int | None = None,
           threshold: float = 0.5) -> DetectionResult:
    """Localize watermarked frames and read their parities in ascending order."""
    model.require()
    spec = stft(wave, model.stft_cfg)
    loc = localizer_forward(model, spec.magnitude)
    loc.threshold = threshold
    return decode_scores(loc, restorer_forward(model, spec.magnitude), expected_length)


def detect_from_codes(ids, positions, n_frames: int, expected_length=None) -> DetectionResult:
    """Audio-free path: ideal localizer over ``positions`` and ideal restorer over ``ids``."""
    scores = np.zeros(n_frames)
    scores[np.asarray(positions, dtype=np.int64)] = 1.0
    parity = (np.asarray(ids) % 2).astype(np.float64)
    return decode_scores(LocalizerOutput(scores), RestorerOutput(parity), expected_length)


def calibrate(model: WatermarkModel, waves, ratio=0.1, threshold=0.5, seed=0,
              source="held-out") -> DetectorCalibration:
    """Measure the localizer's frame-level hit rate and false-alarm rate.

    False alarms are counted on the clean clips; hits on the regenerated frames
    of the same clips after :func:`reconstruct_frames`.
    """
    hits = positives = false_alarms = negatives = 0
    for i, wave in enumerate(waves):
        clean = detect(wave, model, threshold=threshold)
        false_alarms += clean.count
        negatives += clean.n_frames
        marked, mask = reconstruct_frames(wave, model, ratio, seed=[seed, i])
        res = detect(marked, model, threshold=threshold)
        flagged = np.zeros(res.n_frames, dtype=bool)
        flagged[res.localizer.detected] = True
        hits += int((flagged & mask).sum())
        positives += int(mask.sum())
    return DetectorCalibration.from_counts(hits, positives, false_alarms, negatives, source)
