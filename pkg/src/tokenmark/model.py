"""The bundle of networks that embedding and detection need."""

from __future__ import annotations

import torch
import torch.nn as nn

from .audio import DEFAULT_SAMPLE_RATE, StftConfig
from .manipulator import Manipulator, ManipulatorConfig
from .stats import DetectorCalibration
from .vq import ConvStack, VQAutoencoder, VQConfig, log_magnitude


class FrameClassifier(nn.Module):
    """Frame-wise logit from a magnitude spectrogram (masked-decoder layout)."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.cfg = cfg
        self.net = ConvStack(cfg.n_freq, 1, cfg.hidden, cfg.kernel, cfg.decoder_dilations)

    def forward(self, magnitude):
        if magnitude.shape[-1] != self.cfg.n_freq:
            raise ValueError(f"expected {self.cfg.n_freq} bins, got {magnitude.shape[-1]}")
        return self.net(log_magnitude(magnitude))[..., 0]


class WatermarkModel(nn.Module):
    def __init__(self, vq_cfg: VQConfig | None = None,
                 manip_cfg: ManipulatorConfig | None = None,
                 stft_cfg: StftConfig | None = None,
                 sample_rate: int = DEFAULT_SAMPLE_RATE):
        super().__init__()
        self.stft_cfg = stft_cfg or StftConfig()
        self.vq_cfg = vq_cfg or VQConfig(n_freq=self.stft_cfg.n_freq)
        if self.vq_cfg.n_freq != self.stft_cfg.n_freq:
            raise ValueError("VQ input width does not match the STFT configuration")
        self.manip_cfg = manip_cfg or ManipulatorConfig(codebook_size=self.vq_cfg.codebook_size)
        if self.manip_cfg.codebook_size != self.vq_cfg.codebook_size:
            raise ValueError("manipulator and codebook sizes differ")
        self.sample_rate = sample_rate
        self.vq = VQAutoencoder(self.vq_cfg)
        self.localizer = FrameClassifier(self.vq_cfg)
        self.restorer = FrameClassifier(self.vq_cfg)
        self.manipulator = Manipulator(self.manip_cfg)
        self.stage1_trained = False
        self.stage2_trained = False
        self.calibration: DetectorCalibration | None = None
        self.metadata: dict = {}

    @property
    def codebook_size(self) -> int:
        return self.vq_cfg.codebook_size

    def stage1_modules(self):
        return {"vq": self.vq, "localizer": self.localizer, "restorer": self.restorer}

    def require(self, stage2: bool = False):
        if not self.stage1_trained:
            raise RuntimeError("model is untrained: run stage-1 training or load a checkpoint")
        if stage2 and not self.stage2_trained:
            raise RuntimeError("manipulator is untrained: run stage-2 training")

    @torch.no_grad()
    def frame_scores(self, magnitude: torch.Tensor):
        """(localizer probability, restorer odd-parity probability), each (..., T)."""
        return torch.sigmoid(self.localizer(magnitude)), torch.sigmoid(self.restorer(magnitude))
