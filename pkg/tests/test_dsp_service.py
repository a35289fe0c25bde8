import numpy as np
import pytest
from scipy import signal as sps

from ppg2resp.core.errors import NoDominantFrequencyError, ShapeError, SignalError
from ppg2resp.models.schemas import PreprocessConfig, SyntheticConfig
from ppg2resp.services import dsp_service
from ppg2resp.services.signal_io_service import generate_synthetic


def naive_dft_magnitude(x):
    n = len(x)
    out = []
    for k in range(n // 2 + 1):
        re = sum(x[j] * np.cos(2 * np.pi * k * j / n) for j in range(n))
        im = -sum(x[j] * np.sin(2 * np.pi * k * j / n) for j in range(n))
        out.append(np.hypot(re, im))
    return np.array(out)


def sinusoid(freq_hz, fs, seconds, phase=0.0):
    t = np.arange(int(round(fs * seconds))) / fs
    return np.sin(2 * np.pi * freq_hz * t + phase)


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------

def test_resample_length_and_dc():
    """125 -> 30 Hz keeps floor(n*30/125) samples and a constant level"""
    x = np.full(60000, 3.0)
    y = dsp_service.resample(x, 125, 30)
    assert y.size == 14400
    # polyphase branches differ in DC gain by the stopband ripple
    assert np.allclose(y[100:-100], 3.0, atol=1e-2)


def test_resample_identity_when_rates_match():
    x = np.random.default_rng(1).standard_normal(101)
    assert np.array_equal(dsp_service.resample(x, 30, 30), x)


def test_resample_rejects_upsampling():
    with pytest.raises(SignalError):
        dsp_service.resample(np.zeros(10), 30, 125)


def test_resampled_sinusoid_keeps_its_rate():
    x = sinusoid(0.25, 125, 60)
    y = dsp_service.resample(x, 125, 30)
    assert y.size == 1800
    assert dsp_service.estimate_rr(y, 30) == pytest.approx(15.0)


# ---------------------------------------------------------------------------
# lowpass
# ---------------------------------------------------------------------------

def test_fir_taps_odd_and_stopband_by_one_and_a_half_cutoff():
    taps = dsp_service.fir_taps(30, 1.0)
    assert taps.size == 101
    assert taps.size % 2 == 1
    _, h = sps.freqz(taps, worN=[0.0, 1.5], fs=30)
    assert abs(h[0]) == pytest.approx(1.0, abs=1e-6)
    assert abs(h[1]) < 0.02


def test_lowpass_dc_gain_is_one():
    y = dsp_service.lowpass(np.full(3000, 2.5), 30, 1.0)
    assert np.allclose(y[300:-300], 2.5, atol=1e-6)


def test_lowpass_attenuates_5hz_by_40db():
    fs = 30
    slow = sinusoid(0.3, fs, 120)
    fast = sinusoid(5.0, fs, 120)
    y = dsp_service.lowpass(slow + fast, fs, 1.0)
    bins_in = np.abs(np.fft.rfft(slow + fast))
    bins_out = np.abs(np.fft.rfft(y))
    k5 = int(round(5.0 * 120))
    assert 20 * np.log10(bins_out[k5] / bins_in[k5]) <= -40


def test_lowpass_preserves_passband_amplitude():
    x = sinusoid(0.2, 30, 120)
    y = dsp_service.lowpass(x, 30, 1.0)
    mid = slice(600, 3000)
    assert np.max(np.abs(y[mid])) == pytest.approx(1.0, rel=0.05)


def test_lowpass_rejects_cutoff_above_nyquist():
    with pytest.raises(SignalError):
        dsp_service.lowpass(np.zeros(100), 30, 15.0)


def test_lowpass_is_deterministic():
    x = np.random.default_rng(3).standard_normal(2000)
    a = dsp_service.lowpass(dsp_service.resample(x, 125, 30), 30, 1.0)
    b = dsp_service.lowpass(dsp_service.resample(x, 125, 30), 30, 1.0)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# segment / normalize
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seconds, expected", [(60, 12), (7, 1), (4, 0)])
def test_segment_counts(seconds, expected):
    x = np.arange(int(seconds * 30), dtype=float)
    segments = dsp_service.segment(x, 30, 5)
    assert len(segments) == expected
    assert all(s.size == 150 for s in segments)
    if segments:
        assert np.array_equal(np.concatenate(segments), x[:150 * expected])


def test_segment_requires_whole_sample_windows():
    with pytest.raises(SignalError):
        dsp_service.segment(np.zeros(100), 30, 0.01)


def test_normalize_examples():
    y, scale = dsp_service.normalize(np.array([0.0, 5.0, 10.0]), (0.0, 1.0))
    assert np.allclose(y, [0.0, 0.5, 1.0])
    assert not scale.constant

    y, scale = dsp_service.normalize(np.array([-3.0, 1.0]), (-1.0, 1.0))
    assert np.allclose(y, [-1.0, 1.0])


def test_normalize_constant_segment_maps_to_midpoint():
    y, scale = dsp_service.normalize(np.array([2.0, 2.0, 2.0]), (-1.0, 1.0))
    assert np.array_equal(y, [0.0, 0.0, 0.0])
    assert scale.constant
    assert np.array_equal(dsp_service.denormalize(y, scale), [2.0, 2.0, 2.0])


def test_denormalize_inverts_normalize():
    x = np.random.default_rng(4).normal(3.0, 7.0, 150)
    y, scale = dsp_service.normalize(x, (-1.0, 1.0))
    assert y.min() >= -1.0 and y.max() <= 1.0
    assert np.allclose(dsp_service.denormalize(y, scale), x, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# spectrum / RR
# ---------------------------------------------------------------------------

def test_fft_magnitude_examples():
    impulse = np.zeros(8)
    impulse[0] = 1.0
    assert np.allclose(dsp_service.fft_magnitude(impulse, 8).bins, 1.0)

    const = dsp_service.fft_magnitude(np.ones(8), 8)
    assert const.n_bins == 5
    assert const.bins[0] == pytest.approx(8.0)
    assert np.allclose(const.bins[1:], 0.0, atol=1e-12)

    cosine = np.cos(2 * np.pi * 3 * np.arange(8) / 8)
    bins = dsp_service.fft_magnitude(cosine, 8).bins
    assert bins[3] == pytest.approx(4.0, abs=1e-9)
    assert np.allclose(np.delete(bins, 3), 0.0, atol=1e-9)


def test_fft_magnitude_matches_naive_dft():
    x = np.random.default_rng(5).standard_normal(21)
    spectrum = dsp_service.fft_magnitude(x, 30)
    assert spectrum.bin_hz == pytest.approx(30 / 21)
    assert np.allclose(spectrum.bins, naive_dft_magnitude(x), atol=1e-9)


def test_fft_magnitude_parseval():
    x = np.random.default_rng(6).standard_normal(64)
    two_sided = np.abs(np.fft.fft(x))
    energy = np.sum(two_sided ** 2) / x.size
    assert energy == pytest.approx(np.sum(x ** 2), rel=1e-9)
    one_sided = dsp_service.fft_magnitude(x, 1).bins
    # interior bins appear twice in the two-sided spectrum, DC and Nyquist once
    folded = one_sided[0] ** 2 + 2 * np.sum(one_sided[1:-1] ** 2) + one_sided[-1] ** 2
    assert folded / x.size == pytest.approx(np.sum(x ** 2), rel=1e-9)


def test_estimate_rr_exact_on_every_integer_bin():
    for bpm in range(6, 46):
        window = sinusoid(bpm / 60, 30, 60, phase=0.3)
        assert dsp_service.estimate_rr(window, 30) == pytest.approx(bpm, abs=1e-9)


def test_estimate_rr_off_bin_resolves_to_nearest():
    for bpm in (12.3, 17.6, 25.45):
        window = sinusoid(bpm / 60, 30, 60)
        assert abs(dsp_service.estimate_rr(window, 30) - bpm) <= 0.5


def test_estimate_rr_ignores_offset_and_scale():
    window = sinusoid(0.25, 30, 60)
    assert dsp_service.estimate_rr(window, 30) == pytest.approx(15.0)
    assert dsp_service.estimate_rr(window + 5.0, 30) == pytest.approx(15.0)
    assert dsp_service.estimate_rr(7.5 * window, 30) == pytest.approx(15.0)


def test_estimate_rr_dominant_of_two_components():
    window = 3 * sinusoid(0.2, 30, 60) + sinusoid(0.45, 30, 60)
    assert dsp_service.estimate_rr(window, 30) == pytest.approx(12.0)


def test_estimate_rr_all_zero_window():
    with pytest.raises(NoDominantFrequencyError, match="no dominant frequency"):
        dsp_service.estimate_rr(np.zeros(1800), 30)


@pytest.mark.parametrize("level", [5.0, 0.1, -3.0])
def test_estimate_rr_constant_window_is_flagged_at_any_level(level):
    with pytest.raises(NoDominantFrequencyError):
        dsp_service.estimate_rr(np.full(1800, level), 30)


def test_estimate_rr_out_of_band_only_is_flagged():
    # 120 whole cycles at 2 Hz: every in-band bin is rounding noise
    with pytest.raises(NoDominantFrequencyError):
        dsp_service.estimate_rr(5.0 + sinusoid(2.0, 30, 60), 30)


def test_estimate_rr_small_oscillation_on_large_offset():
    window = 5.0 + 1e-3 * sinusoid(0.25, 30, 60)
    assert dsp_service.estimate_rr(window, 30) == pytest.approx(15.0)


def test_estimate_rr_custom_band():
    window = sinusoid(0.25, 30, 60) + 2 * sinusoid(0.6, 30, 60)
    assert dsp_service.estimate_rr(window, 30) == pytest.approx(36.0)
    assert dsp_service.estimate_rr(window, 30, band_hz=(0.0, 0.5)) == pytest.approx(15.0)


def test_mae():
    assert dsp_service.mae(np.zeros(2), np.array([1.0, -1.0])) == 1.0
    a, b = np.random.default_rng(7).standard_normal((2, 50))
    assert dsp_service.mae(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)) / 50, abs=1e-12)
    with pytest.raises(ShapeError):
        dsp_service.mae(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# preprocessing chain
# ---------------------------------------------------------------------------

def test_preprocess_eight_minute_recording_gives_96_segments():
    config = SyntheticConfig(rr_bpm=15, am_depth=0.3, fm_depth=0.3, baseline_depth=0.3, noise_std=0.05)
    recording = generate_synthetic(config, seed=1, subject_id="syn")
    segments = dsp_service.preprocess_recording(recording, PreprocessConfig())
    assert len(segments) == 96
    assert [s.segment_index for s in segments] == list(range(96))
    for s in segments:
        assert s.ppg.size == 150 and s.resp.size == 150
        assert s.ppg.min() >= 0.0 and s.ppg.max() <= 1.0
        assert s.resp.min() >= -1.0 and s.resp.max() <= 1.0
        assert s.subject_id == "syn"


def test_window_starts():
    assert list(dsp_service.window_starts(10, 4)) == [0, 4]
    assert list(dsp_service.window_starts(10, 4, 2)) == [0, 2, 4, 6]
