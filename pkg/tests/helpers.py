"""Shared fixtures for gradient checks: tiny float64 models and a central-difference probe."""

import numpy as np
import torch
import torch.nn.functional as F

from tokenmark.attacks import DistortionSpec
from tokenmark.audio import StftConfig, istft_torch, stft_torch
from tokenmark.manipulator import Manipulator, ManipulatorConfig, masked_cross_entropy
from tokenmark.model import WatermarkModel
from tokenmark.training import stage1_step
from tokenmark.vq import VQConfig, vq_loss

SMALL_STFT = StftConfig(n_fft=64, hop=16, win_length=64)
SMALL_RES = ((64, 16), (128, 32))


def small_model(seed=0) -> WatermarkModel:
    torch.manual_seed(seed)
    vq = VQConfig(n_freq=SMALL_STFT.n_freq, hidden=16, codebook_size=8, code_dim=8)
    manip = ManipulatorConfig(codebook_size=8, layers=1, hidden=16, heads=2, filter=32,
                              kernel=3, embed_dim=16, max_len=64)
    return WatermarkModel(vq, manip, SMALL_STFT).double()


def directional_check(loss_fn, params, seed=0, h=1e-7):
    """Relative error between autograd and a central difference along a random direction."""
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs) if gr is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        up = float(loss_fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        down = float(loss_fn())
        for p, d in zip(params, dirs):
            p.add_(h * d)
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _batch(seed=0, n=512, batch=2, frac=0.3):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.standard_normal((batch, n)) * 0.1)
    T = SMALL_STFT.n_frames(n)
    masks = torch.as_tensor(rng.random((batch, T)) < frac)
    masks[:, 0] = True
    return x, masks


def check_vq_reconstruction(seed=0):
    """VQ objective (reconstruction + codebook) w.r.t. masked-decoder parameters."""
    model = small_model(seed)
    x, masks = _batch(seed)
    spec = stft_torch(x, SMALL_STFT)
    mag, phase = spec.abs(), torch.angle(spec)

    def loss():
        recon, _, code_loss, _ = model.vq(mag, masks)
        y = istft_torch(recon, phase, SMALL_STFT, x.shape[-1])
        return vq_loss(x, y, code_loss, resolutions=SMALL_RES).total

    return directional_check(loss, list(model.vq.decoder.parameters()), seed)


def check_codebook_terms(seed=0):
    """Codebook and commitment terms against their stop-gradient-resolved surrogates.

    With the stop-gradient operands frozen, the codebook term is ``|e - z|^2``
    as a function of the entries and the commitment term ``beta |z - e|^2`` as
    a function of the encoder.
    """
    model = small_model(seed)
    x, _ = _batch(seed)
    mag = stft_torch(x, SMALL_STFT).abs()
    q = model.vq.quantizer
    latents = model.vq.encode(mag).detach()
    ids = q(latents)[0].ids
    err_entries = directional_check(lambda: F.mse_loss(q.embed[ids], latents),
                                    [q.embed], seed)
    frozen = q.embed[ids].detach()
    beta = model.vq_cfg.commitment

    def commit():
        z = model.vq.encode(mag)
        # value and gradient of quantize()'s loss when entries are held fixed
        return beta * F.mse_loss(z, frozen)

    err_encoder = directional_check(commit, list(model.vq.encoder.parameters()), seed)
    # quantize() must expose exactly these two gradients
    z = model.vq.encode(mag)
    _, total, _ = q(z)
    g_auto = torch.autograd.grad(total, list(model.vq.encoder.parameters()) + [q.embed])
    z2 = model.vq.encode(mag)
    ref = F.mse_loss(q.embed[ids], z2.detach()) + beta * F.mse_loss(z2, q.embed[ids].detach())
    g_ref = torch.autograd.grad(ref, list(model.vq.encoder.parameters()) + [q.embed])
    err_split = max(float((a - b).abs().max()) for a, b in zip(g_auto, g_ref))
    return max(err_entries, err_encoder, err_split)


def check_first_stage(seed=0, kinds=("NONE", "AS")):
    """First-stage total through the attack layer w.r.t. decoder, localizer and restorer."""
    model = small_model(seed)
    x, masks = _batch(seed, n=2048)  # default loss resolutions reach 2048 samples
    specs = [DistortionSpec(k, seed=i) for i, k in enumerate(kinds)]
    params = [p for m in (model.vq.decoder, model.localizer, model.restorer)
              for p in m.parameters()]

    def loss():
        return stage1_step(model, x, masks, specs, lambda_res=0.7)[0]

    return directional_check(loss, params, seed)


def check_localizer_bce(seed=0):
    model = small_model(seed)
    x, masks = _batch(seed)
    mag = stft_torch(x, SMALL_STFT).abs()
    return directional_check(
        lambda: F.binary_cross_entropy_with_logits(model.localizer(mag), masks.double()),
        list(model.localizer.parameters()), seed)


def check_manipulator_ce(seed=0):
    torch.manual_seed(seed)
    m = Manipulator(ManipulatorConfig(codebook_size=8, layers=2, hidden=16, heads=2, filter=32,
                                      kernel=3, embed_dim=16, max_len=32)).double()
    rng = np.random.default_rng(seed)
    ids = torch.as_tensor(rng.integers(0, 8, (3, 20)))
    mask = torch.as_tensor(rng.random((3, 20)) < 0.4)
    mask[:, 0] = True
    return directional_check(lambda: masked_cross_entropy(m(ids, mask), ids, mask),
                             list(m.parameters()), seed)


GRADIENT_CHECKS = {
    "vq reconstruction": check_vq_reconstruction,
    "codebook terms": check_codebook_terms,
    "first-stage total": check_first_stage,
    "localizer BCE": check_localizer_bce,
    "manipulator CE": check_manipulator_ce,
}


def oracle_roundtrip_ber(seed, n_frames=300, codebook_size=128):
    """Embed into a random token sequence and read parities back through the ideal detector."""
    from tokenmark.codec import capacity, choose_positions, detect_from_codes, substitute_tokens
    from tokenmark.metrics import ber

    rng = np.random.default_rng(seed)
    ids = rng.integers(0, codebook_size, n_frames)
    n_bits = int(rng.integers(1, capacity(n_frames) + 1))
    bits = rng.integers(0, 2, n_bits)
    positions = choose_positions(n_frames, n_bits, rng)
    logits = rng.standard_normal((n_frames, codebook_size))
    new = substitute_tokens(ids, positions, bits, logits, seed=rng)
    out = detect_from_codes(new, positions, n_frames, expected_length=n_bits)
    return ber(bits, out.aligned_bits)


ACCEPTANCE_LINES = []


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    """Print and keep one pass/fail line; the conftest echoes them after the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
