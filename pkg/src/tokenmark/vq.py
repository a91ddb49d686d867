"""Masked VQ autoencoder over magnitude spectrogram frames.

Layouts: spectrograms and latents are ``(batch, T, channels)``; masks are
``(batch, T)`` booleans with True marking frames the decoder regenerates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import StftConfig, stft_torch

LOG_FLOOR = 1e-5


def log_magnitude(mag: torch.Tensor) -> torch.Tensor:
    return torch.log(mag.clamp_min(LOG_FLOOR))


@dataclass
class VQConfig:
    n_freq: int = 201
    hidden: int = 128
    kernel: int = 3
    encoder_dilations: tuple = (1, 1, 1)
    decoder_dilations: tuple = (1, 2, 1)
    codebook_size: int = 128
    code_dim: int = 128
    commitment: float = 0.25
    usage_decay: float = 0.99
    dead_threshold: float = 1.0
    reinit_noise: float = 0.01

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least one even and one odd id")
        self.encoder_dilations = tuple(self.encoder_dilations)
        self.decoder_dilations = tuple(self.decoder_dilations)


class ConvResBlock(nn.Module):
    def __init__(self, channels, kernel, dilation):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel, dilation=dilation,
                               padding=dilation * (kernel - 1) // 2)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class ConvStack(nn.Module):
    """in-projection, residual dilated conv blocks, out-projection; no pooling."""

    def __init__(self, in_ch, out_ch, hidden, kernel, dilations):
        super().__init__()
        self.inp = nn.Conv1d(in_ch, hidden, kernel, padding=(kernel - 1) // 2)
        self.blocks = nn.ModuleList(ConvResBlock(hidden, kernel, d) for d in dilations)
        self.out = nn.Conv1d(hidden, out_ch, 1)

    def forward(self, x):  # (B, T, C) -> (B, T, out)
        h = self.inp(x.transpose(1, 2))
        for block in self.blocks:
            h = block(h)
        return self.out(F.gelu(h)).transpose(1, 2)


class Encoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.cfg = cfg
        self.net = ConvStack(cfg.n_freq, cfg.code_dim, cfg.hidden, cfg.kernel,
                             cfg.encoder_dilations)

    def forward(self, magnitude):
        if magnitude.shape[-1] != self.cfg.n_freq:
            raise ValueError(f"expected {self.cfg.n_freq} bins, got {magnitude.shape[-1]}")
        return self.net(log_magnitude(magnitude))


class MaskedDecoder(nn.Module):
    """Regenerates masked frames from their codes plus the unmasked context.

    Each frame's code enters as the quantized vector plus a learned embedding
    of the token's parity, so the bit carried by a frame is always visible to
    the decoder while the vector decides the spectral detail.
    """

    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.cfg = cfg
        self.parity_embed = nn.Embedding(2, cfg.code_dim)
        with torch.no_grad():
            # start odd and even on opposite sides of one direction so they are separable
            direction = F.normalize(torch.randn(cfg.code_dim), dim=0) * cfg.code_dim ** 0.5
            self.parity_embed.weight.mul_(0.1).add_(torch.stack([-direction, direction]))
        self.net = ConvStack(2 * cfg.code_dim + cfg.n_freq + 1, cfg.n_freq, cfg.hidden,
                             cfg.kernel, cfg.decoder_dilations)

    def forward(self, codes, ids, magnitude, mask):
        if not (codes.shape[:2] == ids.shape == magnitude.shape[:2] == mask.shape):
            raise ValueError("codes, ids, spectrogram and mask must share (batch, T)")
        w = mask.unsqueeze(-1).to(magnitude.dtype)
        context = log_magnitude(magnitude) * (1 - w)
        code_feats = torch.cat([codes, self.parity_embed(ids % 2).to(codes.dtype)], dim=-1)
        gen = self.net(torch.cat([code_feats * w, context, w], dim=-1))
        gen = torch.exp(gen.clamp(max=12.0))
        return torch.where(mask.unsqueeze(-1), gen, magnitude)


@dataclass
class CodeSequence:
    ids: torch.Tensor  # (..., T) int64
    vectors: torch.Tensor  # (..., T, d)


def nearest_codes(latents: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the closest entry; ties resolve to the lowest id."""
    if entries.shape[0] == 0:
        raise ValueError("empty codebook")
    if latents.shape[-1] != entries.shape[-1]:
        raise ValueError("latent width does not match codebook")
    z = latents.detach().reshape(-1, latents.shape[-1]).double()
    e = entries.detach().double()
    dist = (z * z).sum(1, keepdim=True) - 2 * z @ e.T + (e * e).sum(1)
    return dist.argmin(1).reshape(latents.shape[:-1])


def quantize(latents: torch.Tensor, entries: torch.Tensor, commitment: float = 0.25):
    """Nearest-entry quantization with a straight-through estimator.

    Returns ``(CodeSequence, codebook_loss, st_vectors)``.  ``st_vectors`` equal
    ``CodeSequence.vectors`` in value but pass gradients to the latents.
    """
    ids = nearest_codes(latents, entries)
    q = entries[ids]
    loss = F.mse_loss(q, latents.detach()) + commitment * F.mse_loss(latents, q.detach())
    st = latents + (q - latents).detach()
    return CodeSequence(ids, q), loss, st


def reinit_dead_codes(entries: torch.Tensor, usage: torch.Tensor, recent_latents: torch.Tensor,
                      threshold: float = 1.0, noise: float = 0.01,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Move entries whose usage EMA is below ``threshold`` onto recent encoder outputs.

    Live entries are returned untouched.  Noise is scaled by the latents' std.
    """
    dead = usage < threshold
    n_dead = int(dead.sum())
    if n_dead == 0:
        return entries.clone()
    pool = recent_latents.detach().reshape(-1, entries.shape[1]).to(entries.dtype)
    pick = torch.randint(pool.shape[0], (n_dead,), generator=generator)
    jitter = torch.randn(n_dead, entries.shape[1], generator=generator, dtype=entries.dtype)
    out = entries.detach().clone()
    out[dead] = pool[pick] + noise * pool.std() * jitter
    return out


class VectorQuantizer(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(cfg.codebook_size, cfg.code_dim) / cfg.code_dim ** 0.5)
        self.register_buffer("usage", torch.zeros(cfg.codebook_size))
        self.register_buffer("tracked", torch.zeros((), dtype=torch.bool))

    def forward(self, latents):
        return quantize(latents, self.embed, self.cfg.commitment)

    @torch.no_grad()
    def update_usage(self, ids):
        counts = torch.bincount(ids.reshape(-1), minlength=self.cfg.codebook_size).to(self.usage)
        if not self.tracked:
            self.usage.copy_(counts)
            self.tracked.fill_(True)
        else:
            self.usage.mul_(self.cfg.usage_decay).add_((1 - self.cfg.usage_decay) * counts)

    @torch.no_grad()
    def reinit_dead(self, recent_latents, generator=None) -> int:
        dead = int((self.usage < self.cfg.dead_threshold).sum())
        if dead:
            new = reinit_dead_codes(self.embed, self.usage, recent_latents,
                                    self.cfg.dead_threshold, self.cfg.reinit_noise, generator)
            self.embed.copy_(new)
            # revived entries get one window of grace before they can be culled again
            self.usage[self.usage < self.cfg.dead_threshold] = self.cfg.dead_threshold
        return dead


class VQAutoencoder(nn.Module):
    def __init__(self, cfg: VQConfig | None = None):
        super().__init__()
        self.cfg = cfg or VQConfig()
        self.encoder = Encoder(self.cfg)
        self.quantizer = VectorQuantizer(self.cfg)
        self.decoder = MaskedDecoder(self.cfg)

    def encode(self, magnitude):
        return self.encoder(magnitude)

    def tokenize(self, magnitude) -> CodeSequence:
        codes, _, _ = self.quantizer(self.encoder(magnitude))
        return codes

    def lookup(self, ids) -> torch.Tensor:
        return self.quantizer.embed[ids]

    def masked_decode(self, codes: CodeSequence, magnitude, mask):
        return self.decoder(codes.vectors, codes.ids, magnitude, mask)

    def forward(self, magnitude, mask):
        latents = self.encoder(magnitude)
        codes, code_loss, st = self.quantizer(latents)
        recon = self.decoder(st, codes.ids, magnitude, mask)
        return recon, codes, code_loss, latents


DEFAULT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))


def multi_resolution_stft_loss(target: torch.Tensor, estimate: torch.Tensor,
                               resolutions=DEFAULT_RESOLUTIONS, eps: float = 1e-7):
    """Spectral convergence + log-magnitude L1, averaged over resolutions."""
    total = target.new_zeros(())
    for n_fft, hop in resolutions:
        cfg = StftConfig(n_fft=n_fft, hop=hop, win_length=n_fft)
        a = stft_torch(target, cfg).abs()
        b = stft_torch(estimate, cfg).abs()
        sc = torch.linalg.vector_norm(a - b) / torch.linalg.vector_norm(a).clamp_min(eps)
        mag = (torch.log(a + eps) - torch.log(b + eps)).abs().mean()
        total = total + sc + mag
    return total / len(resolutions)


@dataclass
class VQLoss:
    total: torch.Tensor
    rec: torch.Tensor
    code: torch.Tensor
    adv: torch.Tensor

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in ("total", "rec", "code", "adv")}


def vq_loss(target_wave, recon_wave, code_loss, adv_loss=None, adv_weight=1e-2,
            resolutions=DEFAULT_RESOLUTIONS) -> VQLoss:
    """Reconstruction + codebook + weighted adversarial term, kept separately."""
    rec = multi_resolution_stft_loss(target_wave, recon_wave, resolutions)
    adv = adv_loss if adv_loss is not None else rec.new_zeros(())
    return VQLoss(rec + code_loss + adv_weight * adv, rec, code_loss, adv)


def lsgan_generator_loss(fake_outputs) -> torch.Tensor:
    return sum(torch.mean((1 - f) ** 2) for f in fake_outputs)


def lsgan_discriminator_loss(real_outputs, fake_outputs) -> torch.Tensor:
    return sum(torch.mean((1 - r) ** 2) + torch.mean(f ** 2)
               for r, f in zip(real_outputs, fake_outputs))
