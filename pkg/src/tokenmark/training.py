"""Two-stage training.

Stage 1 trains the VQ autoencoder, localizer and restorer jointly through the
attack simulator.  Stage 2 freezes them and fits the manipulator to predict
masked tokens.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .attacks import DIFFERENTIABLE, distort, random_spec
from .audio import StftConfig, Waveform, istft_torch, sample_mask, stft_torch
from .codec import calibrate
from .manipulator import ManipulatorConfig, masked_cross_entropy
from .model import WatermarkModel
from .vq import VQConfig, lsgan_discriminator_loss, lsgan_generator_loss, vq_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 1234
    batch_size: int = 8
    segment_seconds: float = 0.5
    stage1_steps: int = 5000
    stage2_steps: int = 2000
    stage2_crop: int = 128
    lr: float = 2e-3
    warmup_steps: int = 200
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    lambda_res: float = 1.0
    lambda_res_late: float = 0.5
    lambda_res_switch: float = 0.5  # fraction of stage-1 steps
    lambda_adv: float = 1e-2
    adversarial: bool = False
    gamma_min: float = 0.1
    gamma_max: float = 0.5
    catalog: tuple = ("NONE", "GN", "AS", "RS", "MF", "LP", "EA", "QTZ", "SS", "PN")
    reinit_every: int = 25
    calibration_clips: int = 8
    calibration_ratio: float = 0.1
    log_every: int = 1
    vq: dict = field(default_factory=dict)
    manipulator: dict = field(default_factory=dict)
    stft: dict = field(default_factory=dict)

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.catalog = tuple(self.catalog)
        if not 0 < self.gamma_min <= self.gamma_max <= 0.5:
            raise ValueError("gamma range must lie within (0, 0.5]")
        for name in ("lambda_res", "lambda_res_late", "lambda_adv", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.catalog:
            raise ValueError("distortion catalog is empty")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self):
        return dataclasses.asdict(self)

    def lambda_res_at(self, step: int) -> float:
        switch = int(round(self.lambda_res_switch * self.stage1_steps))
        return self.lambda_res if step < switch else self.lambda_res_late

    def build_model(self) -> WatermarkModel:
        stft_cfg = StftConfig(**self.stft)
        vq_cfg = VQConfig(**{"n_freq": stft_cfg.n_freq, **self.vq})
        manip_cfg = ManipulatorConfig(**{"codebook_size": vq_cfg.codebook_size, **self.manipulator})
        torch.manual_seed(self.seed)
        return WatermarkModel(vq_cfg, manip_cfg, stft_cfg)


SMOKE_STEPS = {"stage1_steps": 1200, "stage2_steps": 600}


def smoke_config(**overrides) -> TrainConfig:
    """The desk-scale run used by the acceptance suite and the demos.

    Same settings as :class:`TrainConfig` except the step counts, which keep
    both stages under ten minutes on one CPU core.
    """
    return TrainConfig(**{**SMOKE_STEPS, **overrides})


def noam_lr(step: int, base: float, warmup: int) -> float:
    """Linear warm-up then inverse square-root decay; peaks at ``base``."""
    step = max(step, 1)
    return base * min(step / warmup, math.sqrt(warmup / step))


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


class SegmentSampler:
    """Random fixed-length crops from a list of waveforms."""

    def __init__(self, corpus, n_samples: int, rng: np.random.Generator):
        if not corpus:
            raise ValueError("empty corpus")
        self.clips = [w.samples for w in corpus]
        self.n = n_samples
        self.rng = rng

    def batch(self, size: int) -> torch.Tensor:
        out = np.zeros((size, self.n))
        for i in range(size):
            clip = self.clips[self.rng.integers(len(self.clips))]
            if clip.size > self.n:
                start = self.rng.integers(clip.size - self.n + 1)
                out[i] = clip[start: start + self.n]
            else:
                out[i, : clip.size] = clip
        return torch.from_numpy(out).float()


def _check_finite(record: dict, step: int, stage: str):
    bad = {k: v for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"{stage} diverged at step {step}: non-finite {bad}")


class JsonLog:
    def __init__(self, path=None):
        self.records = []
        self.fh = open(path, "w") if path else None

    def write(self, record: dict):
        self.records.append(record)
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def stage1_step(model: WatermarkModel, x: torch.Tensor, masks: torch.Tensor, specs,
                lambda_res: float, lambda_adv: float = 0.0, discriminator=None):
    """Losses of one first-stage step.  ``specs`` holds one DistortionSpec per row."""
    cfg = model.stft_cfg
    n = x.shape[-1]
    spec = stft_torch(x, cfg)
    mag, phase = spec.abs(), torch.angle(spec)
    recon, codes, code_loss, _ = model.vq(mag, masks)
    y_hat = istft_torch(recon, phase, cfg, n)
    attacked = torch.stack([
        distort(y_hat[i], s, model.sample_rate) if s.kind in DIFFERENTIABLE
        else distort(y_hat[i].detach(), s, model.sample_rate)
        for i, s in enumerate(specs)])
    s_tilde = stft_torch(attacked, cfg).abs()

    loc_logits = model.localizer(s_tilde)
    l_loc = F.binary_cross_entropy_with_logits(loc_logits, masks.to(loc_logits.dtype))
    res_logits = model.restorer(s_tilde)
    parity = (codes.ids % 2).to(res_logits.dtype)
    l_res = F.binary_cross_entropy_with_logits(res_logits[masks], parity[masks])

    adv = None
    if discriminator is not None:
        adv = lsgan_generator_loss(discriminator(y_hat))
    vql = vq_loss(x, y_hat, code_loss, adv, lambda_adv)
    total = l_loc + lambda_res * l_res + vql.total

    with torch.no_grad():
        loc_acc = ((loc_logits > 0) == masks).float().mean()
        res_acc = ((res_logits[masks] > 0).float() == parity[masks]).float().mean()
    parts = {"loc": l_loc, "res": l_res, "rec": vql.rec, "code": vql.code, "adv": vql.adv}
    stats = {"loc_acc": float(loc_acc), "res_acc": float(res_acc)}
    return total, parts, stats, codes, y_hat


def train_stage1(corpus, cfg: TrainConfig, model: WatermarkModel | None = None,
                 out_path=None, log_path=None, discriminator=None,
                 calibration_corpus=None) -> WatermarkModel:
    """First stage: VQ autoencoder + localizer + restorer under random attacks."""
    if not corpus:
        raise ValueError("empty corpus")
    if cfg.adversarial and discriminator is None:
        raise ValueError("adversarial training needs a discriminator module")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or cfg.build_model()
    model.train()
    sampler = SegmentSampler(corpus, int(round(cfg.segment_seconds * model.sample_rate)), rng)
    params = [p for m in model.stage1_modules().values() for p in m.parameters()]
    opt = _adam(params, cfg)
    d_opt = _adam(discriminator.parameters(), cfg) if discriminator is not None else None
    gen = torch.Generator().manual_seed(cfg.seed)
    logger = JsonLog(log_path)
    t0 = time.perf_counter()
    try:
        for step in range(cfg.stage1_steps):
            _set_lr(opt, noam_lr(step + 1, cfg.lr, cfg.warmup_steps))
            x = sampler.batch(cfg.batch_size)
            T = model.stft_cfg.n_frames(x.shape[-1])
            gamma = float(rng.uniform(cfg.gamma_min, cfg.gamma_max))
            masks = torch.from_numpy(np.stack(
                [sample_mask(T, gamma, rng).flags for _ in range(cfg.batch_size)]))
            specs = [random_spec(cfg.catalog, rng.integers(2**31)) for _ in range(cfg.batch_size)]
            lam = cfg.lambda_res_at(step)
            total, parts, stats, codes, y_hat = stage1_step(
                model, x, masks, specs, lam, cfg.lambda_adv if cfg.adversarial else 0.0,
                discriminator)
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()

            if d_opt is not None:
                d_opt.zero_grad()
                lsgan_discriminator_loss(discriminator(x), discriminator(y_hat.detach())).backward()
                d_opt.step()

            model.vq.quantizer.update_usage(codes.ids)
            revived = 0
            if cfg.reinit_every and (step + 1) % cfg.reinit_every == 0:
                with torch.no_grad():
                    latents = model.vq.encode(stft_torch(x, model.stft_cfg).abs())
                revived = model.vq.quantizer.reinit_dead(latents, gen)

            record = {"stage": 1, "step": step, "gamma": gamma, "lambda_res": lam,
                      "lambda_adv": cfg.lambda_adv if cfg.adversarial else 0.0,
                      "total": total.item(), **{k: v.item() for k, v in parts.items()},
                      **stats, "revived": revived,
                      "codes_used": int(torch.unique(codes.ids).numel()),
                      "kinds": [s.kind for s in specs]}
            _check_finite(record, step, "stage 1")
            if step % cfg.log_every == 0 or step == cfg.stage1_steps - 1:
                logger.write(record)
            if step % 100 == 0:
                log.info("stage1 step %d total %.4f loc_acc %.3f res_acc %.3f (%.0fs)", step,
                         record["total"], stats["loc_acc"], stats["res_acc"],
                         time.perf_counter() - t0)
    finally:
        logger.close()
    model.eval()
    model.stage1_trained = True
    model.metadata["stage1"] = {"steps": cfg.stage1_steps, "seed": cfg.seed,
                                "final": logger.records[-1] if logger.records else None,
                                "config": cfg.to_dict()}
    model.train_log = logger.records
    held_out = calibration_corpus or corpus[: cfg.calibration_clips]
    model.calibration = calibrate(model, held_out, cfg.calibration_ratio, seed=cfg.seed,
                                  source="calibration corpus" if calibration_corpus else "training clips")
    if out_path:
        checkpoint.save(model, out_path)
    return model


def parameter_digest(modules) -> str:
    h = hashlib.sha256()
    for module in modules:
        for name, t in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def tokenize_corpus(model: WatermarkModel, corpus) -> list[np.ndarray]:
    seqs = []
    for wave in corpus:
        mag = stft_torch(torch.from_numpy(wave.samples), model.stft_cfg).abs().float()
        seqs.append(model.vq.tokenize(mag[None]).ids[0].numpy())
    return seqs


def train_manipulator(manipulator, sequences, cfg: TrainConfig, steps=None, crop=None,
                      log_path=None) -> list[dict]:
    """Fit the masked token predictor on integer sequences; returns the log records."""
    if not sequences:
        raise ValueError("no token sequences")
    torch.manual_seed(cfg.seed + 1)
    rng = np.random.default_rng([cfg.seed, 2])
    steps = cfg.stage2_steps if steps is None else steps
    crop = min(crop or manipulator.cfg.max_len, min(len(s) for s in sequences))
    opt = _adam(manipulator.parameters(), cfg)
    logger = JsonLog(log_path)
    manipulator.train()
    try:
        for step in range(steps):
            _set_lr(opt, noam_lr(step + 1, cfg.lr, cfg.warmup_steps))
            batch = np.zeros((cfg.batch_size, crop), dtype=np.int64)
            for i in range(cfg.batch_size):
                seq = sequences[rng.integers(len(sequences))]
                start = rng.integers(len(seq) - crop + 1)
                batch[i] = seq[start: start + crop]
            gamma = float(rng.uniform(cfg.gamma_min, cfg.gamma_max))
            mask = np.stack([sample_mask(crop, gamma, rng).flags for _ in range(cfg.batch_size)])
            ids, mask_t = torch.from_numpy(batch), torch.from_numpy(mask)
            logits = manipulator(ids, mask_t)
            loss = masked_cross_entropy(logits, ids, mask_t)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(manipulator.parameters(), cfg.grad_clip)
            opt.step()
            with torch.no_grad():
                acc = (logits[mask_t].argmax(-1) == ids[mask_t]).float().mean()
            record = {"stage": 2, "step": step, "gamma": gamma, "total": loss.item(),
                      "ce": loss.item(), "acc": float(acc)}
            _check_finite(record, step, "stage 2")
            if step % cfg.log_every == 0 or step == steps - 1:
                logger.write(record)
            if step % 100 == 0:
                log.info("stage2 step %d ce %.4f acc %.3f", step, record["ce"], record["acc"])
    finally:
        logger.close()
    manipulator.eval()
    return logger.records


def train_stage2(corpus, stage1, cfg: TrainConfig, out_path=None, log_path=None) -> WatermarkModel:
    """Second stage: manipulator on tokens of the frozen stage-1 model.

    ``stage1`` is a WatermarkModel or a checkpoint path.
    """
    if stage1 is None:
        raise FileNotFoundError("stage-1 checkpoint required")
    model = checkpoint.load(stage1) if isinstance(stage1, (str, Path)) else stage1
    if not model.stage1_trained:
        raise RuntimeError("stage-1 checkpoint required")
    if not corpus:
        raise ValueError("empty corpus")
    frozen = list(model.stage1_modules().values())
    for m in frozen:
        m.eval()
        m.requires_grad_(False)
    before = parameter_digest(frozen)
    seqs = tokenize_corpus(model, corpus)
    records = train_manipulator(model.manipulator, seqs, cfg, crop=cfg.stage2_crop,
                                log_path=log_path)
    for m in frozen:
        m.requires_grad_(True)
    if parameter_digest(frozen) != before:  # pragma: no cover - freeze contract
        raise RuntimeError("stage-1 parameters changed during stage 2")
    model.stage2_trained = True
    model.metadata["stage2"] = {"steps": len(records), "seed": cfg.seed,
                                "final": records[-1] if records else None}
    model.train_log = getattr(model, "train_log", []) + records
    if out_path:
        checkpoint.save(model, out_path)
    return model


def masked_accuracy(manipulator, sequences, gamma=0.3, seed=0) -> tuple[float, float]:
    """(top-1 accuracy on masked frames, accuracy of always predicting the most common token)."""
    rng = np.random.default_rng(seed)
    counts = np.bincount(np.concatenate(sequences), minlength=manipulator.cfg.codebook_size)
    common = int(np.argmax(counts))
    hits = base = total = 0
    with torch.no_grad():
        for seq in sequences:
            mask = sample_mask(len(seq), gamma, rng).flags
            ids = torch.from_numpy(np.asarray(seq, dtype=np.int64))[None]
            pred = manipulator(ids, torch.from_numpy(mask)[None])[0].argmax(-1).numpy()
            hits += int((pred[mask] == seq[mask]).sum())
            base += int((seq[mask] == common).sum())
            total += int(mask.sum())
    return hits / total, base / total
