"""Deterministic signal processing used by ingestion, training and evaluation.

Everything here is a pure function of its inputs.
"""
import math
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from ppg2resp.core.errors import NoDominantFrequencyError, ShapeError, SignalError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import (
    NormScale, PreprocessConfig, Recording, SegmentPair, SpectrumMagnitude,
)

logger = get_logger(__name__)

DEFAULT_RR_BAND_HZ = (0.0, 0.75)
# in-band peak at or below this fraction of the window's L1 norm is rounding noise
RR_PEAK_REL_TOL = 1e-9


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Anti-aliased rational downsampling; output length is floor(len * fs_out / fs_in)"""
    x = np.asarray(x, dtype=np.float64)
    if not fs_out > 0:
        raise SignalError(f"fs_out must be > 0 (got {fs_out})")
    if fs_out > fs_in:
        raise SignalError(f"upsampling is not supported ({fs_in} Hz -> {fs_out} Hz)")
    if fs_in == fs_out:
        return x.copy()

    ratio = Fraction(fs_out).limit_denominator(10_000) / Fraction(fs_in).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(math.floor(x.size * fs_out / fs_in + 1e-9))
    if x.size == 0 or n_out == 0:
        return np.zeros(0)
    # resample_poly low-passes at fs_out/2 before decimating
    y = sps.resample_poly(x, up, down, padtype="line")
    return y[:n_out]


def fir_taps(fs: float, cutoff: float) -> np.ndarray:
    """Hamming windowed-sinc low-pass; stopband starts by 1.5 * cutoff"""
    half = int(math.ceil(1.65 * fs / cutoff))
    return sps.firwin(2 * half + 1, cutoff, window="hamming", fs=fs)


def lowpass(x: np.ndarray, fs: float, cutoff: float) -> np.ndarray:
    """Zero-phase FIR low-pass (forward-backward application)"""
    x = np.asarray(x, dtype=np.float64)
    if not 0 < cutoff < fs / 2:
        raise SignalError(f"cutoff {cutoff} Hz must lie in (0, {fs / 2}) Hz")
    if x.size < 2:
        return x.copy()
    taps = fir_taps(fs, cutoff)
    padlen = min(3 * taps.size, x.size - 1)
    return sps.filtfilt(taps, [1.0], x, padlen=padlen)


def segment(x: np.ndarray, fs: float, window_s: float) -> List[np.ndarray]:
    """Consecutive non-overlapping windows; a trailing partial window is dropped"""
    n = fs * window_s
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise SignalError(f"fs * window_s must be a positive integer (got {n})")
    n = int(round(n))
    x = np.asarray(x)
    return [x[i:i + n] for i in range(0, x.size - n + 1, n)]


def normalize(x: np.ndarray, target: Tuple[float, float]) -> Tuple[np.ndarray, NormScale]:
    """Min-max map onto ``target``; constant inputs land on the target midpoint"""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise SignalError("cannot normalise an empty segment")
    lo, hi = float(target[0]), float(target[1])
    x_min, x_max = float(x.min()), float(x.max())
    span = x_max - x_min
    if span == 0.0:
        mid = 0.5 * (lo + hi)
        return np.full_like(x, mid), NormScale(offset=x_min, span=0.0, target=(lo, hi), constant=True)
    y = lo + (x - x_min) / span * (hi - lo)
    # pin the endpoints so rounding cannot push samples outside the target range
    y = np.clip(y, lo, hi)
    return y, NormScale(offset=x_min, span=span, target=(lo, hi))


def denormalize(y: np.ndarray, scale: NormScale) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    lo, hi = scale.target
    if scale.constant:
        return np.full_like(y, scale.offset)
    return scale.offset + (y - lo) / (hi - lo) * scale.span


def fft_magnitude(x: np.ndarray, fs: float) -> SpectrumMagnitude:
    """One-sided DFT magnitudes, floor(len/2)+1 bins spaced fs/len apart"""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise SignalError("cannot take the spectrum of an empty signal")
    return SpectrumMagnitude(bins=np.abs(np.fft.rfft(x)), bin_hz=fs / x.size)


def estimate_rr(
    window: np.ndarray,
    fs: float,
    band_hz: Tuple[float, float] = DEFAULT_RR_BAND_HZ,
) -> float:
    """Breaths per minute at the strongest non-DC bin within ``band_hz``.

    Flat windows, and windows whose in-band content is rounding noise, raise
    ``NoDominantFrequencyError`` whatever their constant level.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.size < 2:
        raise SignalError("RR window needs at least 2 samples")
    if not fs > 0:
        raise SignalError("fs must be > 0")
    if np.ptp(window) == 0:
        raise NoDominantFrequencyError("no dominant frequency: window is constant")

    spectrum = fft_magnitude(window, fs)
    freqs = spectrum.frequencies
    # small tolerance so a bin landing exactly on the upper edge is kept
    band = (freqs > max(band_hz[0], 0.0)) & (freqs <= band_hz[1] + 1e-9)
    if not np.any(band):
        raise SignalError(f"no DFT bin falls inside {band_hz} Hz for a {window.size}-sample window")
    candidates = np.flatnonzero(band)
    mags = spectrum.bins[candidates]
    if mags.max() <= RR_PEAK_REL_TOL * max(1.0, float(np.sum(np.abs(window)))):
        raise NoDominantFrequencyError()
    # argmax returns the first maximum, i.e. the lowest frequency on ties
    best = candidates[int(np.argmax(mags))]
    return 60.0 * float(freqs[best])


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("mae of empty sequences is undefined")
    return float(np.mean(np.abs(a - b)))


def preprocess_channel(x: np.ndarray, fs: float, config: PreprocessConfig) -> np.ndarray:
    y = resample(x, fs, config.target_fs)
    return lowpass(y, config.target_fs, config.cutoff_hz)


def preprocess_recording(recording: Recording, config: Optional[PreprocessConfig] = None) -> List[SegmentPair]:
    """Resample, low-pass, segment and normalise both channels of a recording"""
    config = config or PreprocessConfig()
    ppg = preprocess_channel(recording.ppg, recording.fs, config)
    resp = preprocess_channel(recording.resp, recording.fs, config)

    pairs: List[SegmentPair] = []
    ppg_segments = segment(ppg, config.target_fs, config.segment_s)
    resp_segments = segment(resp, config.target_fs, config.segment_s)
    n_constant = 0
    for index, (p, r) in enumerate(zip(ppg_segments, resp_segments)):
        p_norm, p_scale = normalize(p, config.ppg_range)
        r_norm, r_scale = normalize(r, config.resp_range)
        n_constant += int(p_scale.constant or r_scale.constant)
        pairs.append(SegmentPair(
            ppg=p_norm, resp=r_norm,
            subject_id=recording.subject_id, segment_index=index,
            ppg_scale=p_scale, resp_scale=r_scale,
        ))

    logger.info(
        f"Preprocessed {recording.subject_id}: {len(pairs)} segments of {config.segment_length} samples"
        + (f" ({n_constant} constant, retained)" if n_constant else "")
    )
    return pairs


def window_starts(n: int, window: int, step: Optional[int] = None) -> Sequence[int]:
    step = step or window
    if window < 1 or step < 1:
        raise SignalError("window and step must be >= 1 sample")
    return range(0, n - window + 1, step)
