import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import oracle_roundtrip_ber
from tokenmark.audio import StftConfig, stft
from tokenmark.codec import (CapacityExceeded, LocalizerOutput, RestorerOutput, WatermarkPlan,
                             capacity, choose_positions, decode_scores, detect, detect_from_codes,
                             embed, format_bits, parse_bits, pick_peaks, position_spacing, smooth_scores,
                             read_parity, reconstruct_frames, substitute_tokens)
from tokenmark.corpus import synth_speech
from tokenmark.model import WatermarkModel


@pytest.fixture(scope="module")
def untrained():
    """Random weights with the stage flags set: enough for contract checks, not for BER."""
    torch.manual_seed(0)
    model = WatermarkModel().eval()
    model.stage1_trained = model.stage2_trained = True
    return model


class TestCapacity:
    def test_one_second_clip(self):
        T = StftConfig().n_frames(24000)
        assert T == 300 and capacity(T) == 150

    def test_limits(self, untrained):
        wave = synth_speech(1.0, seed=1)
        embed(wave, [1], untrained)  # 1-bit minimum
        embed(wave, np.ones(150, dtype=int), untrained)
        with pytest.raises(CapacityExceeded):
            embed(wave, np.ones(151, dtype=int), untrained)
        with pytest.raises(ValueError):
            embed(wave, [], untrained)

    def test_ratio_too_small_for_payload(self, untrained):
        with pytest.raises(CapacityExceeded):
            embed(synth_speech(1.0, seed=1), np.ones(40, dtype=int), untrained, ratio=0.1)


class TestBits:
    @pytest.mark.parametrize("text, bits", [("0101", [0, 1, 0, 1]), ("0xA3", [1, 0, 1, 0, 0, 0, 1, 1]),
                                            (" 1 ", [1]), ("0x0", [0, 0, 0, 0])])
    def test_parse(self, text, bits):
        assert parse_bits(text).tolist() == bits

    @pytest.mark.parametrize("text", ["", "0x", "012", "0xZZ", "10a"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_bits(text)

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
    def test_format_roundtrip(self, bits):
        assert parse_bits(format_bits(bits)).tolist() == bits


class TestPlan:
    def test_validation(self):
        with pytest.raises(ValueError):
            WatermarkPlan([1, 0], [3], 10)
        with pytest.raises(ValueError):
            WatermarkPlan([1, 0], [3, 3], 10)
        with pytest.raises(ValueError):
            WatermarkPlan([1], [10], 10)
        with pytest.raises(CapacityExceeded):
            WatermarkPlan([1, 0, 1], [0, 1, 2], 5)

    def test_json_roundtrip(self):
        plan = WatermarkPlan([1, 0, 1], [2, 5, 7], 20, np.arange(20), np.arange(20))
        back = WatermarkPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
        assert back.bits.tolist() == [1, 0, 1] and back.positions.tolist() == [2, 5, 7]
        assert plan.ratio == 0.15 and plan.mask.count == 3

    def test_positions_sorted_unique(self):
        p = choose_positions(300, 150, 3)
        assert p.size == 150 and np.all(np.diff(p) > 0)

    @given(st.integers(1, 400), st.integers(1, 200), st.integers(0, 2**31))
    def test_positions_respect_spacing(self, n_frames, n_bits, seed):
        if n_bits > capacity(n_frames):
            return
        p = choose_positions(n_frames, n_bits, seed)
        assert p.size == n_bits and p.min() >= 0 and p.max() < n_frames
        if n_bits > 1:
            assert np.diff(p).min() >= position_spacing(n_frames, n_bits)

    def test_spacing_values(self):
        assert position_spacing(300, 30) == 3
        assert position_spacing(300, 150) == 2
        assert position_spacing(5, 5) == 1

    def test_spaced_positions_cover_range_evenly(self):
        # every frame is reachable and the first position is not biased to 0
        hits = np.zeros(300)
        for seed in range(300):
            hits[choose_positions(300, 30, seed)] += 1
        assert hits.min() > 0 and abs(hits[:150].sum() - hits[150:].sum()) < 0.1 * hits.sum()


class TestOracle:
    @pytest.mark.parametrize("seed", range(200))
    def test_roundtrip_zero_ber(self, seed):
        assert oracle_roundtrip_ber(seed) == 0.0

    @given(st.integers(0, 2**31), st.sampled_from(["manipulator", "random"]))
    @settings(max_examples=50, deadline=None)
    def test_parity_forced_and_rest_untouched(self, seed, selector):
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, 16, 60)
        positions = choose_positions(60, 20, rng)
        bits = rng.integers(0, 2, 20)
        logits = rng.standard_normal((60, 16))
        new = substitute_tokens(ids, positions, bits, logits, selector, seed=seed)
        assert np.array_equal(read_parity(new, positions), bits)
        others = np.setdiff1d(np.arange(60), positions)
        assert np.array_equal(new[others], ids[others])
        matching = positions[ids[positions] % 2 == bits]
        assert np.array_equal(new[matching], ids[matching])

    def test_manipulator_choice_is_parity_argmax(self):
        logits = np.zeros((3, 8))
        logits[1, [2, 5, 7]] = [9.0, 4.0, 3.0]
        new = substitute_tokens(np.array([0, 0, 0]), np.array([1]), np.array([1]), logits)
        assert new.tolist() == [0, 5, 0]

    def test_random_selector_needs_size(self):
        with pytest.raises(ValueError):
            substitute_tokens(np.zeros(4, dtype=int), [1], [1], selector="random")


class TestAlignment:
    def _loc(self, scores):
        return LocalizerOutput(np.asarray(scores, dtype=float))

    def test_exact(self):
        res = decode_scores(self._loc([0.9, 0.1, 0.8]), RestorerOutput(np.array([0.9, 0.5, 0.2])), 2)
        assert res.alignment == "exact" and res.aligned_bits.tolist() == [1, 0]

    def test_truncated_keeps_highest_scores(self):
        scores = [0.6, 0.0, 0.99, 0.0, 0.0, 0.7, 0.0, 0.95]
        res = decode_scores(self._loc(scores), RestorerOutput(np.ones(8) * 0.9), 2)
        assert res.alignment == "truncated" and res.aligned_positions.tolist() == [2, 7]
        assert res.diagnostics["count_mismatch"] == 2

    def test_padded(self):
        res = decode_scores(self._loc([0.2, 0.7, 0.1, 0.3]), RestorerOutput(np.zeros(4)), 3)
        assert res.alignment == "padded" and res.aligned_positions.tolist() == [0, 1, 3]

    def test_peak_picking_skips_neighbours(self):
        # frame 3 bleeds into 2 and 4; the second peak is at 8
        scores = np.zeros(20)
        scores[[2, 3, 4, 8, 9]] = [0.9, 0.95, 0.92, 0.8, 0.7]
        res = decode_scores(self._loc(scores), RestorerOutput(np.zeros(20)), 2)
        assert res.aligned_positions.tolist() == [3, 8]
        assert pick_peaks(scores, 2, 0).tolist() == [3, 4]

    def test_smoothing_prefers_the_centre_of_a_bump(self):
        # frame 5 scores slightly below 6, but both of its neighbours are raised
        scores = np.zeros(30)
        scores[[4, 5, 6]] = [0.8, 0.9, 0.95]
        scores[20] = 0.5
        res = decode_scores(self._loc(scores), RestorerOutput(np.zeros(30)), 2)
        assert res.aligned_positions.tolist() == [5, 20]
        assert np.array_equal(smooth_scores(scores, 0), scores)
        assert smooth_scores(scores, 1)[5] == pytest.approx(0.9 + 0.4 + 0.475)

    def test_peak_picking_fills_when_peaks_run_out(self):
        assert pick_peaks([0.1, 0.9, 0.2, 0.8], 3, 1).tolist() == [1, 2, 3]

    def test_without_expected_length(self):
        res = detect_from_codes([3, 4, 5, 6], [0, 2], 4)
        assert res.bits.tolist() == [1, 1] and res.aligned_bits is None and res.count == 2


class TestEmbedContract:
    def test_unmasked_frames_unchanged(self, untrained):
        wave = synth_speech(1.0, seed=2)
        res = embed(wave, [1, 0, 1, 1, 0], untrained, seed=4)
        keep = ~res.plan.mask.flags
        assert np.array_equal(res.magnitude[keep], res.original_magnitude[keep])
        assert len(res.wave) == len(wave)
        assert np.array_equal(read_parity(res.plan.watermarked_ids, res.plan.positions), [1, 0, 1, 1, 0])

    def test_deterministic(self, untrained):
        wave = synth_speech(1.0, seed=2)
        a = embed(wave, [1, 0, 1], untrained, seed=9)
        b = embed(wave, [1, 0, 1], untrained, seed=9)
        assert np.array_equal(a.wave.samples, b.wave.samples)

    def test_explicit_positions_and_tiling(self, untrained):
        wave = synth_speech(1.0, seed=2)
        res = embed(wave, [1, 0], untrained, positions=[10, 40])
        assert res.plan.positions.tolist() == [10, 40]
        tiled = embed(wave, [1, 0, 0], untrained, ratio=0.1)
        assert tiled.plan.bits.size == 30 and tiled.plan.bits[:6].tolist() == [1, 0, 0, 1, 0, 0]

    def test_frames_far_from_watermark_keep_samples(self, untrained):
        wave = synth_speech(1.0, seed=2)
        res = embed(wave, [1], untrained, positions=[150])
        # a frame touches samples within +-n_fft/2 of its centre
        lo, hi = 150 * 80 - 200, 150 * 80 + 200
        outside = np.r_[0:lo, hi:len(wave)]
        np.testing.assert_allclose(res.wave.samples[outside], np.clip(wave.samples[outside], -1, 1),
                                   atol=1e-9)

    def test_untrained_model_refused(self):
        with pytest.raises(RuntimeError, match="untrained"):
            embed(synth_speech(1.0), [1], WatermarkModel())
        with pytest.raises(RuntimeError, match="untrained"):
            detect(synth_speech(1.0), WatermarkModel())

    def test_detect_shapes(self, untrained):
        wave = synth_speech(1.0, seed=5)
        res = detect(wave, untrained, expected_length=12)
        assert res.n_frames == 300 and res.aligned_bits.size == 12
        assert np.all((res.localizer.scores >= 0) & (res.localizer.scores <= 1))
        d = res.to_dict()
        assert set(d) >= {"n_frames", "detected", "bits", "confidences", "alignment"}

    def test_reconstruct_frames_mask_count(self, untrained):
        wave = synth_speech(1.0, seed=5)
        out, mask = reconstruct_frames(wave, untrained, 0.1, seed=1)
        assert mask.sum() == 30 and len(out) == len(wave)
        assert np.array_equal(stft(out).magnitude.shape, (300, 201))
