import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenmark.audio import Waveform
from tokenmark.metrics import (SNR_CAP_DB, EvalReport, aligned_ber, ber, bits_per_second,
                               log_spectral_distance, null_false_positive_rate, plot_loss_curve,
                               snr)


class TestBer:
    def test_values(self):
        assert ber([0, 1, 1, 0], [0, 1, 1, 0]) == 0.0
        assert ber([0, 1, 1, 0], [1, 1, 1, 1]) == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            ber([], [])
        with pytest.raises(ValueError):
            ber([1, 0], [1])

    def test_aligned_counts_missing_as_errors(self):
        assert aligned_ber([1, 0, 1, 1], [1, 0]) == 0.5
        assert aligned_ber([1, 0], [1, 0, 1, 1]) == 0.0

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=64))
    def test_complement_is_one(self, bits):
        assert ber(bits, [1 - b for b in bits]) == 1.0


class TestSnr:
    def test_known_ratio(self):
        x = np.random.default_rng(0).standard_normal(1000)
        assert snr(x, 1.1 * x) == pytest.approx(20.0)

    def test_identical_is_capped(self):
        x = np.ones(10)
        assert snr(x, x) == SNR_CAP_DB
        assert snr(Waveform(x), Waveform(x)) == SNR_CAP_DB

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            snr(np.ones(3), np.ones(4))


def test_log_spectral_distance():
    a = np.ones((5, 4))
    assert log_spectral_distance(a, a) == 0.0
    assert log_spectral_distance(a, 10 * a) == pytest.approx(20.0)
    assert log_spectral_distance(a, 10 * a, frames=[0, 2]) == pytest.approx(20.0)


def test_bits_per_second():
    assert bits_per_second(32, 1.0) == 32.0


def test_null_fpr_monte_carlo():
    # beta = 0.1, T = 300: normal approximation is accurate, tail ~ 3e-5
    assert null_false_positive_rate(300, 0.1, trials=100_000, seed=1) <= 1e-3
    assert null_false_positive_rate(300, 0.1, trials=1000, seed=1, threshold=-10) == 1.0


def test_report_files(tmp_path):
    rep = EvalReport("demo", ber_table={"NONE": 0.0, "AS": 0.1},
                     z_sweep=[{"m": 0.1, "z_mean": 5.0, "z_min": 4.5, "snr_mean": 30.0, "tpr": 1.0},
                              {"m": 0.2, "z_mean": 9.0, "z_min": 8.0, "snr_mean": 25.0, "tpr": 1.0}])
    paths = rep.write(tmp_path)
    assert set(paths) == {"json", "ber_csv", "sweep_csv", "sweep_png"}
    assert (tmp_path / "demo_ber.csv").read_text().splitlines()[0] == "distortion,ber"
    png = plot_loss_curve([{"step": 0, "total": 1.0}, {"step": 1, "total": 0.5}], tmp_path / "l.png")
    assert png.exists()
