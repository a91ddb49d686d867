"""Utterance-level decisions from frame-level detections (one-proportion Z-test)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from scipy.stats import binom, norm

DEFAULT_Z_THRESHOLD = 4.0


@dataclass
class DetectorCalibration:
    """Frame-level rates of the localizer, measured on held-out data.

    alpha is only used for reporting / expected counts; the test uses beta.
    """
    alpha: float
    beta: float
    source: str = "unknown"
    n_frames: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie strictly inside (0, 1)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    @classmethod
    def from_counts(cls, hits, positives, false_alarms, negatives, source="unknown"):
        """Rates from raw frame counts, with a half-count added so beta never hits 0 or 1."""
        alpha = (hits + 0.5) / (positives + 1.0)
        beta = (false_alarms + 0.5) / (negatives + 1.0)
        return cls(alpha, beta, source, int(positives + negatives))

    def to_dict(self):
        return asdict(self)


@dataclass
class DetectionVerdict:
    count: int
    T: int
    beta: float
    z: float
    p: float
    watermarked: bool
    threshold: float = DEFAULT_Z_THRESHOLD

    def to_dict(self):
        return {"count": self.count, "T": self.T, "beta": self.beta, "z": self.z,
                "p": self.p, "decision": self.watermarked, "threshold": self.threshold}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def z_statistic(count, T, beta) -> float:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie strictly inside (0, 1); variance is degenerate")
    return (count - beta * T) / math.sqrt(beta * (1.0 - beta) * T)


def expected_count(alpha, beta, m, T) -> float:
    """Expected detected frames when a fraction m of T frames is watermarked."""
    return alpha * m * T + beta * (1.0 - m) * T


def p_value(z) -> float:
    """One-sided upper-tail standard normal probability."""
    return float(norm.sf(z))


def exact_p_value(count, T, beta) -> float:
    """P(X >= count) for X ~ Binomial(T, beta); for checking the normal approximation."""
    return float(binom.sf(count - 1, T, beta))


def utterance_decision(z, threshold=DEFAULT_Z_THRESHOLD) -> bool:
    return bool(z > threshold)


def verdict(count, T, calibration: DetectorCalibration,
            threshold=DEFAULT_Z_THRESHOLD) -> DetectionVerdict:
    z = z_statistic(count, T, calibration.beta)
    # keep p inside (0, 1) even when the normal tail underflows
    p = min(max(p_value(z), 1e-300), 1.0 - 1e-16)
    return DetectionVerdict(int(count), int(T), calibration.beta, z, p,
                            utterance_decision(z, threshold), threshold)
