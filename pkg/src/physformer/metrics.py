"""Physiological read-outs and evaluation statistics.

Heart rate comes from the argmax of the class-frequency power spectrum.
Beat detection and the heart-rate-variability report follow standard
practice: inter-beat intervals are resampled to a uniform 4 Hz grid by
cubic interpolation, and low/high frequency powers are integrated over
[0.04, 0.15] Hz and [0.15, 0.4] Hz, reported in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import interpolate, signal as sp_signal

from .losses import HR_MIN_BPM, psd_at_classes
from .tensor import no_grad

__all__ = [
    "HrEstimate",
    "HrvReport",
    "MetricSet",
    "NoEstimateError",
    "InsufficientBeatsError",
    "bandpass_pulse",
    "estimate_hr",
    "detect_peaks",
    "hrv_report",
    "metric_set",
]

LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
HRV_RESAMPLE_HZ = 4.0


class NoEstimateError(ValueError):
    """The spectrum carries no power, so no heart rate can be read off."""


class InsufficientBeatsError(ValueError):
    """Too few beats were detected for the requested analysis."""


@dataclass
class HrEstimate:
    hr_bpm: float
    peak_power: float
    spectrum: np.ndarray


@dataclass
class HrvReport:
    lf_nu: float
    hf_nu: float
    lf_hf: float
    rf_hz: float
    degenerate: bool = False


@dataclass
class MetricSet:
    sd: float
    mae: float
    rmse: float
    r: float | None


def bandpass_pulse(signal: np.ndarray, fs: float, low: float = 0.7,
                   high: float = 3.0, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass onto the plausible pulse band."""
    nyquist = fs / 2.0
    sos = sp_signal.butter(order, [low / nyquist, high / nyquist], btype="band", output="sos")
    return sp_signal.sosfiltfilt(sos, np.asarray(signal, dtype=np.float64))


def estimate_hr(signal: np.ndarray, fs: float) -> HrEstimate:
    """Heart rate as the strongest class frequency of the signal."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] < 2 * fs:
        raise ValueError(f"need at least 2 s of samples, got {signal.shape[0]} at fs={fs}")
    with no_grad():
        spectrum = psd_at_classes(signal, fs).data
    peak = int(np.argmax(spectrum))
    if spectrum[peak] <= 0.0:
        raise NoEstimateError("spectrum is identically zero")
    return HrEstimate(hr_bpm=float(peak + HR_MIN_BPM),
                      peak_power=float(spectrum[peak]),
                      spectrum=spectrum)


def detect_peaks(signal: np.ndarray, fs: float,
                 prominence_factor: float = 0.3) -> np.ndarray:
    """Beat times (s) as local maxima of a band-passed pulse signal.

    Peaks must be separated by at least 60/180 s and rise above
    ``prominence_factor`` times the signal's standard deviation.
    """
    signal = np.asarray(signal, dtype=np.float64)
    spread = signal.std()
    if spread == 0.0:
        raise InsufficientBeatsError("constant signal has no beats")
    distance = max(1, int(np.ceil(fs * 60.0 / 180.0)))
    peaks, _ = sp_signal.find_peaks(signal, distance=distance,
                                    prominence=prominence_factor * spread)
    if len(peaks) < 3:
        raise InsufficientBeatsError(f"found {len(peaks)} beats, need at least 3")
    return peaks / fs


def _band_power(freqs: np.ndarray, power: np.ndarray, band: tuple[float, float]) -> float:
    inside = (freqs >= band[0]) & (freqs <= band[1])
    return float(np.trapezoid(power[inside], freqs[inside]))


def hrv_report(beat_times: np.ndarray) -> HrvReport:
    """Spectral variability of the inter-beat intervals.

    Needs at least 30 s of beats. Intervals are cubic-interpolated to a
    uniform 4 Hz grid, mean-removed, and projected onto a dense
    frequency grid by direct Fourier sums.
    """
    beat_times = np.asarray(beat_times, dtype=np.float64)
    if len(beat_times) < 5:
        raise InsufficientBeatsError(f"need at least 5 beats for HRV, got {len(beat_times)}")
    span = beat_times[-1] - beat_times[0]
    if span < 30.0:
        raise InsufficientBeatsError(f"need at least 30 s of beats, got {span:.1f} s")
    intervals = np.diff(beat_times)
    anchor = beat_times[1:]
    grid = np.arange(anchor[0], anchor[-1], 1.0 / HRV_RESAMPLE_HZ)
    series = interpolate.CubicSpline(anchor, intervals)(grid)
    series = series - series.mean()

    freqs = np.arange(0.01, HF_BAND[1] + 0.1, 0.005)
    angles = 2.0 * np.pi * np.outer(freqs, grid)
    power = (series @ np.cos(angles).T) ** 2 + (series @ np.sin(angles).T) ** 2
    power /= len(grid)

    lf = _band_power(freqs, power, LF_BAND)
    hf = _band_power(freqs, power, HF_BAND)
    total = lf + hf
    if total <= 1e-12 * len(grid):
        return HrvReport(lf_nu=float("nan"), hf_nu=float("nan"),
                         lf_hf=float("nan"), rf_hz=float("nan"), degenerate=True)
    hf_slice = (freqs >= HF_BAND[0]) & (freqs <= HF_BAND[1])
    rf = float(freqs[hf_slice][np.argmax(power[hf_slice])])
    return HrvReport(lf_nu=lf / total, hf_nu=hf / total,
                     lf_hf=(lf / hf if hf > 0 else float("inf")), rf_hz=rf)


def metric_set(pred_hrs, gt_hrs) -> MetricSet:
    """SD of the error, MAE, RMSE, and Pearson r between estimates and truth."""
    pred = np.asarray(pred_hrs, dtype=np.float64)
    gt = np.asarray(gt_hrs, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or len(pred) == 0:
        raise ValueError(f"need equal nonempty 1-d arrays, got {pred.shape} and {gt.shape}")
    err = pred - gt
    sd = float(err.std())
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    r: float | None = None
    if len(pred) >= 2 and pred.std() > 0 and gt.std() > 0:
        r = float(np.corrcoef(pred, gt)[0, 1])
    return MetricSet(sd=sd, mae=mae, rmse=rmse, r=r)
