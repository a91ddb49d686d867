"""Evaluation metrics and experiment harnesses."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import EVAL_KINDS, CodecUnavailable, DistortionSpec, apply
from .audio import Waveform
from .stats import DEFAULT_Z_THRESHOLD, verdict, z_statistic

SNR_CAP_DB = 1000.0


def ber(sent, recovered) -> float:
    sent, recovered = np.asarray(sent), np.asarray(recovered)
    if sent.size == 0:
        raise ValueError("BER of an empty bit string is undefined")
    if sent.shape != recovered.shape:
        raise ValueError("bit strings differ in length; align them first")
    return float(np.mean(sent != recovered))


def aligned_ber(sent, recovered) -> float:
    """BER over the first min(L, n) bits; bits missing from ``recovered`` count as errors."""
    sent, recovered = np.asarray(sent), np.asarray(recovered)
    if sent.size == 0:
        raise ValueError("BER of an empty bit string is undefined")
    k = min(sent.size, recovered.size)
    errors = int(np.sum(sent[:k] != recovered[:k])) + (sent.size - k)
    return errors / sent.size


def snr(reference, test) -> float:
    """10 log10(sum ref^2 / sum (ref - test)^2), capped at SNR_CAP_DB."""
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    tst = np.asarray(getattr(test, "samples", test), dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError("signals differ in length")
    err = np.sum((ref - tst) ** 2)
    sig = np.sum(ref ** 2)
    if err == 0:
        return SNR_CAP_DB
    if sig == 0:
        return -SNR_CAP_DB
    return float(min(10 * np.log10(sig / err), SNR_CAP_DB))


def log_spectral_distance(mag_a, mag_b, frames=None, floor=1e-5) -> float:
    """Mean over frames of the RMS dB difference between two magnitude spectrograms."""
    a, b = np.asarray(mag_a), np.asarray(mag_b)
    if frames is not None:
        a, b = a[frames], b[frames]
    d = 20 * np.log10(np.maximum(a, floor)) - 20 * np.log10(np.maximum(b, floor))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=-1))))


def bits_per_second(n_bits: int, duration: float) -> float:
    return n_bits / duration


def null_false_positive_rate(T: int, beta: float, trials: int = 100_000, seed=0,
                             threshold: float = DEFAULT_Z_THRESHOLD) -> float:
    """Fraction of Binomial(T, beta) null counts whose Z-statistic exceeds ``threshold``."""
    counts = np.random.default_rng(seed).binomial(T, beta, size=trials)
    z = (counts - beta * T) / math.sqrt(beta * (1 - beta) * T)
    return float(np.mean(z > threshold))


def select_positions_best_of_n(wave: Waveform, bits, model, n: int, seed=0, **embed_kw):
    """Embed with ``n`` random position sets and keep the one with the highest SNR.

    Candidate ``i`` always uses seed ``(seed, i)``, so the candidates of a
    smaller ``n`` are a prefix of those of a larger one.
    Returns ``(EmbedResult, snr_db, all_snrs)``.
    """
    from .codec import embed

    if n < 1:
        raise ValueError("n must be at least 1")
    best, best_snr, snrs = None, -np.inf, []
    for i in range(n):
        res = embed(wave, bits, model, seed=[int(np.sum(np.atleast_1d(seed))), i], **embed_kw)
        s = snr(wave, res.wave)
        snrs.append(s)
        if s > best_snr:
            best, best_snr = res, s
    return best, best_snr, snrs


@dataclass
class EvalReport:
    mode: str
    ber_table: dict = field(default_factory=dict)
    snr_db: float | None = None
    bps: float | None = None
    rtf: float | None = None
    pesq: float | None = None
    z_sweep: list = field(default_factory=list)
    utterance: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    n_clips: int = 0

    def to_dict(self):
        return asdict(self)

    def write(self, out_dir) -> dict:
        """JSON report, CSV tables and plots; returns the written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{self.mode}_report.json"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2))
        if self.ber_table:
            paths["ber_csv"] = out / f"{self.mode}_ber.csv"
            with open(paths["ber_csv"], "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["distortion", "ber"])
                for k, v in self.ber_table.items():
                    w.writerow([k, v])
        if self.z_sweep:
            paths["sweep_csv"] = out / f"{self.mode}_z_sweep.csv"
            with open(paths["sweep_csv"], "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.z_sweep[0]))
                w.writeheader()
                w.writerows(self.z_sweep)
            paths["sweep_png"] = plot_tradeoff(self.z_sweep, out / f"{self.mode}_tradeoff.png")
        return {k: str(v) for k, v in paths.items()}


def plot_tradeoff(sweep, path, threshold=DEFAULT_Z_THRESHOLD):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = [r["m"] for r in sweep]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(m, [r["z_mean"] for r in sweep], "o-", label="Z-statistic")
    ax.axhline(threshold, color="red", linestyle="--", label=f"Z = {threshold}")
    ax.set_xlabel("watermark ratio m")
    ax.set_ylabel("Z-statistic")
    ax2 = ax.twinx()
    ax2.plot(m, [r["snr_mean"] for r in sweep], "s:", color="tab:green", label="SNR")
    ax2.set_ylabel("SNR (dB)")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curve(records, path, key="total"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["step"] for r in records], [r[key] for r in records])
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _segment(wave: Waveform, seconds: float, rng) -> Waveform:
    n = int(round(seconds * wave.sample_rate))
    if len(wave) <= n:
        return wave
    start = int(rng.integers(len(wave) - n + 1))
    return Waveform(wave.samples[start: start + n], wave.sample_rate)


def run_information_hiding_eval(corpus, model, bps: float = 32, catalog=EVAL_KINDS, seed=0,
                                segment_seconds: float = 1.0, oracle: bool = False,
                                pesq_fn=None) -> EvalReport:
    """Segment-level payload recovery under each distortion.

    ``oracle=True`` reads parities straight from the watermarked token ids,
    bypassing audio, localizer and restorer.
    """
    from .codec import detect, detect_from_codes, embed

    model.require(stage2=True)
    rng = np.random.default_rng(seed)
    errors = {k: [] for k in catalog}
    snrs, pesqs, flags = [], [], {}
    skipped = set()
    elapsed = audio_seconds = 0.0
    n_bits = None
    for i, wave in enumerate(corpus):
        seg = _segment(wave, segment_seconds, rng)
        n_bits = max(1, int(round(bps * seg.duration)))
        bits = rng.integers(0, 2, n_bits)
        t0 = time.perf_counter()
        res = embed(seg, bits, model, seed=[seed, i])
        elapsed += time.perf_counter() - t0
        snrs.append(snr(seg, res.wave))
        if pesq_fn is not None:
            pesqs.append(pesq_fn(seg, res.wave))
        for kind in catalog:
            if kind in skipped:
                continue
            if oracle:
                out = detect_from_codes(res.plan.watermarked_ids, res.plan.positions,
                                        res.plan.n_frames, expected_length=n_bits)
            else:
                try:
                    attacked = apply(res.wave, DistortionSpec(kind, seed=int(rng.integers(2**31))))
                except CodecUnavailable:
                    skipped.add(kind)
                    continue
                t0 = time.perf_counter()
                out = detect(attacked, model, expected_length=n_bits)
                if kind == "NONE":
                    elapsed += time.perf_counter() - t0
                    audio_seconds += seg.duration
            errors[kind].append(aligned_ber(bits, out.aligned_bits))
            flags[out.alignment] = flags.get(out.alignment, 0) + 1
    table = {k: float(np.mean(v)) for k, v in errors.items() if v}
    if table:
        table["MEAN"] = float(np.mean([v for k, v in table.items()]))
    return EvalReport(
        mode="information_hiding", ber_table=table, snr_db=float(np.mean(snrs)),
        bps=bits_per_second(n_bits, segment_seconds) if n_bits else None,
        rtf=elapsed / audio_seconds if audio_seconds else None,
        pesq=float(np.mean(pesqs)) if pesqs else None, alignment=flags,
        skipped=sorted(skipped), n_clips=len(corpus))


def run_ai_detection_eval(corpus, model, m: float = 0.1, threshold: float = DEFAULT_Z_THRESHOLD,
                          catalog=("NONE",), sweep=(0.03, 0.05, 0.1, 0.2, 0.3), seed=0,
                          pesq_fn=None) -> EvalReport:
    """Utterance-level detection via the Z-test, plus a (m, z, SNR) sweep."""
    from .attacks import random_attack
    from .codec import detect, reconstruct_frames

    model.require()
    if model.calibration is None:
        raise RuntimeError("model has no detector calibration; run calibrate() first")
    cal = model.calibration
    rng = np.random.default_rng(seed)

    def score(wave):
        res = detect(wave, model)
        return verdict(res.count, res.n_frames, cal, threshold)

    tp = fp = 0
    elapsed = audio = 0.0
    for i, wave in enumerate(corpus):
        t0 = time.perf_counter()
        marked, _ = reconstruct_frames(wave, model, m, seed=[seed, i])
        attacked, _ = random_attack(marked, catalog, int(rng.integers(2**31)))
        tp += score(attacked).watermarked
        elapsed += time.perf_counter() - t0
        audio += wave.duration
        fp += score(wave).watermarked
    rows = []
    for ratio in sweep:
        zs, snrs = [], []
        for i, wave in enumerate(corpus):
            marked, _ = reconstruct_frames(wave, model, ratio, seed=[seed, i, 1])
            attacked, _ = random_attack(marked, catalog, int(rng.integers(2**31)))
            res = detect(attacked, model)
            zs.append(z_statistic(res.count, res.n_frames, cal.beta))
            snrs.append(snr(wave, marked))
        rows.append({"m": ratio, "z_mean": float(np.mean(zs)), "z_min": float(np.min(zs)),
                     "snr_mean": float(np.mean(snrs)),
                     "tpr": float(np.mean(np.asarray(zs) > threshold))})
    n = len(corpus)
    return EvalReport(mode="ai_detection", rtf=elapsed / audio if audio else None,
                      z_sweep=rows, n_clips=n,
                      utterance={"m": m, "threshold": threshold, "tpr": tp / n, "fpr": fp / n,
                                 "beta": cal.beta, "alpha": cal.alpha})


def desk_checks(model, clips, ratio: float = 0.1, best_of=(1, 2, 4, 8), seed=0) -> dict:
    """End-to-end checks on a trained toy model.

    Per clip: no-distortion BER with ``round(ratio * T)`` random bits; spectral
    distance at the watermark frames for manipulator-argmax and for random
    opposite-parity substitution (same positions and bits); and the best SNR
    found by best-of-n position search for each n in ``best_of`` (first clip).
    """
    from .audio import mask_count, stft
    from .codec import detect, embed

    rng = np.random.default_rng(seed)
    bers, lsd_manip, lsd_random = [], [], []
    for i, wave in enumerate(clips):
        n = mask_count(stft(wave, model.stft_cfg).n_frames, ratio)
        bits = rng.integers(0, 2, n)
        res = embed(wave, bits, model, seed=[seed, i])
        found = detect(res.wave, model, expected_length=n)
        bers.append(aligned_ber(bits, found.aligned_bits))
        frames = res.plan.positions
        lsd_manip.append(log_spectral_distance(res.magnitude, res.original_magnitude, frames))
        rand = embed(wave, bits, model, positions=frames, seed=[seed, i], selector="random")
        lsd_random.append(log_spectral_distance(rand.magnitude, rand.original_magnitude, frames))
    wave = clips[0]
    bits = rng.integers(0, 2, mask_count(stft(wave, model.stft_cfg).n_frames, ratio))
    _, _, snrs = select_positions_best_of_n(wave, bits, model, max(best_of), seed=seed)
    return {"ber": float(np.mean(bers)), "ber_per_clip": [float(b) for b in bers],
            "lsd_manipulator": float(np.mean(lsd_manip)), "lsd_random": float(np.mean(lsd_random)),
            "best_of_n": {int(n): float(max(snrs[:n])) for n in best_of}, "candidate_snrs": snrs}
