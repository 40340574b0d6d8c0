"""Supervision for pulse regression: temporal, frequency and distribution losses.

Heart rate is treated as a 139-class problem, one class per integer bpm
in [42, 180]. The power spectrum of a predicted signal is evaluated by a
direct Fourier projection at the exact class frequencies (k + 41)/60 Hz;
FFT bins at the clip lengths in play are an order of magnitude coarser
than 1 bpm, so bin snapping would make the classes meaningless. Signals
are mean-removed before the projection to keep DC out of the low classes.

The overall loss is

    total = alpha * time + beta * (ce + ld)

with alpha fixed and beta growing exponentially over training epochs,
beta(e) = beta0 * eta**((e - 1) / total_epochs), an easy-to-hard ramp of
the frequency-domain constraint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "HR_MIN_BPM",
    "HR_MAX_BPM",
    "NUM_HR_CLASSES",
    "ScheduleConfig",
    "LossBreakdown",
    "ConstantSignalWarning",
    "class_frequencies_hz",
    "neg_pearson",
    "psd_at_classes",
    "freq_ce_loss",
    "label_distribution",
    "ld_loss",
    "beta_at",
    "overall_loss",
]

HR_MIN_BPM = 42
HR_MAX_BPM = 180
NUM_HR_CLASSES = HR_MAX_BPM - HR_MIN_BPM + 1  # 139


class ConstantSignalWarning(UserWarning):
    """A predicted signal was constant, so its correlation is undefined."""


@dataclass
class ScheduleConfig:
    """Loss weights and the exponential ramp of the frequency weight."""

    alpha: float = 0.1
    beta0: float = 1.0
    eta: float = 5.0
    total_epochs: int = 25

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if self.beta0 <= 0 or self.eta <= 0:
            raise ValueError("beta0 and eta must be positive")


@dataclass
class LossBreakdown:
    """Per-term values and the weights that combined them for one step."""

    l_time: float
    l_ce: float
    l_ld: float
    l_total: float
    alpha: float
    beta: float


def _hr_class_index(hr_gt: float) -> int:
    hr = int(round(float(hr_gt)))
    if not HR_MIN_BPM <= hr <= HR_MAX_BPM:
        raise ValueError(f"heart rate {hr_gt} bpm outside [{HR_MIN_BPM}, {HR_MAX_BPM}]")
    return hr - HR_MIN_BPM


def class_frequencies_hz() -> np.ndarray:
    """Frequency of each class: 42..180 bpm over 60."""
    return np.arange(HR_MIN_BPM, HR_MAX_BPM + 1, dtype=np.float64) / 60.0


def neg_pearson(y_pred: Tensor, y_true) -> Tensor:
    """1 - Pearson correlation between prediction and reference.

    A constant reference is rejected; a constant prediction returns a
    flat loss of 1 with zero gradient and raises ConstantSignalWarning.
    """
    if not isinstance(y_pred, Tensor):
        y_pred = Tensor(y_pred)
    true = np.asarray(y_true.data if isinstance(y_true, Tensor) else y_true, dtype=np.float64)
    if y_pred.ndim != 1 or true.ndim != 1:
        raise T.ShapeError(f"neg_pearson expects rank-1 signals, got {y_pred.shape} and {true.shape}")
    if y_pred.shape[0] != true.shape[0] or y_pred.shape[0] < 2:
        raise T.ShapeError(f"neg_pearson needs equal lengths >= 2, got {y_pred.shape} and {true.shape}")
    true_centered = true - true.mean()
    true_var = float((true_centered * true_centered).mean())
    if true_var == 0.0:
        raise ValueError("reference signal is constant, correlation undefined")
    if float(y_pred.data.std()) < 1e-12:
        warnings.warn("predicted signal is constant, returning flat loss 1",
                      ConstantSignalWarning, stacklevel=2)
        return Tensor(1.0)
    pred_centered = y_pred - y_pred.mean()
    cov = (pred_centered * Tensor(true_centered)).mean()
    pred_var = (pred_centered * pred_centered).mean()
    correlation = cov / ((pred_var * true_var) ** 0.5)
    return 1.0 - correlation


@lru_cache(maxsize=16)
def _dft_basis(length: int, fs: float) -> tuple[np.ndarray, np.ndarray]:
    phases = 2.0 * np.pi * np.outer(np.arange(length), class_frequencies_hz()) / fs
    return np.cos(phases), -np.sin(phases)


def psd_at_classes(signal, fs: float) -> Tensor:
    """Power of the signal at each of the 139 class frequencies.

    The signal is mean-removed, then p[k] = |sum_t s(t) e^{-2 pi i f_k t / fs}|^2
    evaluated at the exact class frequencies. Differentiable in the signal.
    """
    if not isinstance(signal, Tensor):
        signal = Tensor(signal)
    if signal.ndim != 1 or signal.shape[0] < 2:
        raise T.ShapeError(f"psd_at_classes expects a rank-1 signal of length >= 2, got {signal.shape}")
    fs = float(fs)
    if fs <= 0:
        raise ValueError(f"sampling rate must be positive, got {fs}")
    if class_frequencies_hz()[-1] >= fs / 2.0:
        raise ValueError(
            f"top class frequency {class_frequencies_hz()[-1]:.3f} Hz reaches Nyquist at fs={fs}")
    cos_basis, sin_basis = _dft_basis(signal.shape[0], fs)
    centered = (signal - signal.mean()).reshape((1, signal.shape[0]))
    real = centered @ Tensor(cos_basis)
    imag = centered @ Tensor(sin_basis)
    return (real * real + imag * imag).reshape((NUM_HR_CLASSES,))


def freq_ce_loss(psd: Tensor, hr_gt: float) -> Tensor:
    """Cross-entropy of softmax(psd) against the ground-truth HR class."""
    if not isinstance(psd, Tensor):
        psd = Tensor(psd)
    if psd.shape != (NUM_HR_CLASSES,):
        raise T.ShapeError(f"expected a ({NUM_HR_CLASSES},) spectrum, got {psd.shape}")
    index = _hr_class_index(hr_gt)
    return -T.log_softmax(psd, axis=0)[index]


def label_distribution(hr_gt: float, sigma: float) -> np.ndarray:
    """Gaussian over integer HR classes centered at the ground truth.

    Discrete Gaussian values are renormalized to sum exactly to one,
    which matters near the range boundaries where the tail is cut off.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    index = _hr_class_index(hr_gt)
    offsets = np.arange(NUM_HR_CLASSES, dtype=np.float64) - index
    probs = np.exp(-0.5 * (offsets / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)
    return probs / probs.sum()


def ld_loss(target: np.ndarray, psd: Tensor) -> Tensor:
    """KL divergence from softmax(psd) to the target distribution.

    Zero target entries contribute nothing (0 * log 0 = 0). Nonnegative,
    zero exactly when softmax(psd) equals the target.
    """
    target = np.asarray(target, dtype=np.float64)
    if not isinstance(psd, Tensor):
        psd = Tensor(psd)
    if target.shape != (NUM_HR_CLASSES,) or psd.shape != (NUM_HR_CLASSES,):
        raise T.ShapeError(
            f"ld_loss expects ({NUM_HR_CLASSES},) arrays, got {target.shape} and {psd.shape}")
    if (target < 0).any() or abs(float(target.sum()) - 1.0) > 1e-9:
        raise ValueError("target must be a probability distribution")
    entropy_term = float(np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0).sum())
    cross = (Tensor(target) * T.log_softmax(psd, axis=0)).sum()
    return entropy_term - cross


def beta_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Frequency-loss weight at a 1-based epoch: beta0 * eta^((e-1)/total)."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.total_epochs}]")
    return cfg.beta0 * cfg.eta ** ((epoch - 1) / cfg.total_epochs)


def overall_loss(y_pred: Tensor, y_true, hr_gt: float, fs: float, epoch: int,
                 cfg: ScheduleConfig, sigma: float = 1.0,
                 ld_target: str = "gaussian") -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three losses for one signal.

    ``ld_target`` selects the distribution target: "gaussian" builds it
    from the scalar label, "real" uses the normalized power spectrum of
    the reference signal instead (an ablation variant).
    """
    true = np.asarray(y_true.data if isinstance(y_true, Tensor) else y_true, dtype=np.float64)
    time_loss = neg_pearson(y_pred, true)
    spectrum = psd_at_classes(y_pred, fs)
    ce = freq_ce_loss(spectrum, hr_gt)
    if ld_target == "gaussian":
        target = label_distribution(hr_gt, sigma)
    elif ld_target == "real":
        with T.no_grad():
            real_spec = psd_at_classes(true, fs).data
        total_power = float(real_spec.sum())
        if total_power <= 0:
            raise ValueError("reference spectrum has no power, cannot build a real target")
        target = real_spec / total_power
    else:
        raise ValueError(f"unknown ld_target {ld_target!r}")
    ld = ld_loss(target, spectrum)
    alpha = cfg.alpha
    beta = beta_at(epoch, cfg)
    total = alpha * time_loss + beta * (ce + ld)
    breakdown = LossBreakdown(
        l_time=float(time_loss.data), l_ce=float(ce.data), l_ld=float(ld.data),
        l_total=alpha * float(time_loss.data) + beta * (float(ce.data) + float(ld.data)),
        alpha=alpha, beta=beta)
    return total, breakdown
