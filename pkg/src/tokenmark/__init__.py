"""Speech watermarking in the discrete token space of a masked VQ autoencoder.

Bits are hidden in the parity of codebook ids at chosen frames; a localizer
finds the regenerated frames and a restorer reads their parities back.
"""

from .attacks import DistortionSpec, apply, random_attack
from .audio import StftConfig, Waveform, istft, load_wav, sample_mask, save_wav, stft
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .codec import CapacityExceeded, capacity, detect, embed, parse_bits
from .model import WatermarkModel
from .stats import DetectorCalibration, expected_count, p_value, utterance_decision, verdict, z_statistic

__version__ = "0.1.0"

__all__ = [
    "CapacityExceeded", "DetectorCalibration", "DistortionSpec", "StftConfig", "Waveform",
    "WatermarkModel", "apply", "capacity", "detect", "embed", "expected_count", "istft",
    "load_checkpoint", "load_wav", "p_value", "parse_bits", "random_attack", "sample_mask",
    "save_checkpoint", "save_wav", "stft", "utterance_decision", "verdict", "z_statistic",
]
