"""Synthetic facial-video surrogates with known ground-truth pulse.

Each sample is a static random texture plus, inside a "skin" mask, an
additive pulse waveform (fundamental plus a second harmonic at 0.3x
amplitude, which gives the asymmetric shape of a real blood-volume
pulse and keeps the spectral argmax logic honest). A slow sinusoidal
frequency jitter modulates the instantaneous rate around the label,
global illumination drift and white noise cover the whole frame, and
pixels outside the mask carry drift and noise only, so spatial
attention has something to find.

The waveform, mask, and drift depend only on the declarative config;
the seed drives texture and noise. Two seeds therefore share an
identical ground-truth signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "MaskSpec",
    "SynthConfig",
    "SynthSample",
    "VideoClip",
    "generate",
    "augment_flip",
    "augment_temporal_resample",
    "random_config",
    "pulse_waveform",
]

# frequency of the slow rate modulation, in Hz
JITTER_MOD_HZ = 0.1
# per-channel pulse strength; mean 1 so the mask average tracks the waveform
CHANNEL_PULSE_GAIN = np.array([0.8, 1.2, 1.0])

HR_FLOOR = 42.0
HR_CEIL = 180.0


@dataclass
class VideoClip:
    """A (3, T, H, W) pixel tensor plus its frame rate."""

    pixels: np.ndarray
    fs: float

    @property
    def frames(self) -> int:
        return self.pixels.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.fs


@dataclass
class MaskSpec:
    """Rectangular or elliptical skin region, in fractional coordinates.

    ``center`` is (row, col) and ``radius`` the half extents, both as
    fractions of the frame size.
    """

    kind: str = "ellipse"
    center: tuple[float, float] = (0.5, 0.5)
    radius: tuple[float, float] = (0.3, 0.35)

    def rasterize(self, height: int, width: int) -> np.ndarray:
        rows = (np.arange(height) + 0.5) / height
        cols = (np.arange(width) + 0.5) / width
        dr = (rows[:, None] - self.center[0]) / self.radius[0]
        dc = (cols[None, :] - self.center[1]) / self.radius[1]
        if self.kind == "ellipse":
            return dr * dr + dc * dc <= 1.0
        if self.kind == "rect":
            return (np.abs(dr) <= 1.0) & (np.abs(dc) <= 1.0)
        raise ValueError(f"unknown mask kind {self.kind!r}")


@dataclass
class SynthConfig:
    hr_bpm: float = 75.0
    fs: float = 30.0
    frames: int = 300
    size: tuple[int, int] = (32, 32)
    mask: MaskSpec = field(default_factory=MaskSpec)
    amplitude: float = 2.0
    noise_sigma: float = 0.5
    drift_amp: float = 1.0
    drift_period: float = 6.0
    hr_jitter: float = 0.02
    seed: int = 0


@dataclass
class SynthSample:
    video: VideoClip
    gt_signal: np.ndarray
    gt_hr: float


def pulse_waveform(hr_bpm: float, fs: float, frames: int, jitter: float) -> np.ndarray:
    """Unit pulse: fundamental plus 0.3x second harmonic, slow rate jitter.

    The phase integrates f(t) = f0 (1 + jitter sin(2 pi fm t)) in closed
    form, so the time-averaged fundamental stays exactly hr/60 Hz.
    """
    t = np.arange(frames, dtype=np.float64) / fs
    f0 = hr_bpm / 60.0
    if jitter:
        wobble = -f0 * jitter * (np.cos(2.0 * np.pi * JITTER_MOD_HZ * t) - 1.0) / (2.0 * np.pi * JITTER_MOD_HZ)
    else:
        wobble = 0.0
    phase = 2.0 * np.pi * (f0 * t + wobble)
    return np.sin(phase) + 0.3 * np.sin(2.0 * phase)


def generate(cfg: SynthConfig) -> SynthSample:
    """Render one sample; bit-deterministic in (config, seed)."""
    if not HR_FLOOR <= cfg.hr_bpm <= HR_CEIL:
        raise ValueError(f"hr_bpm {cfg.hr_bpm} outside [{HR_FLOOR}, {HR_CEIL}]")
    if cfg.frames < 2 * cfg.fs:
        raise ValueError(f"need at least 2 s of frames, got {cfg.frames} at fs={cfg.fs}")
    if cfg.amplitude <= 0:
        raise ValueError(f"amplitude must be positive, got {cfg.amplitude}")
    height, width = cfg.size
    mask = cfg.mask.rasterize(height, width)
    coverage = mask.mean()
    if coverage < 0.10:
        raise ValueError(f"mask covers {coverage:.1%} of the frame, need at least 10%")

    wave = pulse_waveform(cfg.hr_bpm, cfg.fs, cfg.frames, cfg.hr_jitter)
    t = np.arange(cfg.frames, dtype=np.float64) / cfg.fs
    drift = cfg.drift_amp * np.sin(2.0 * np.pi * t / cfg.drift_period)

    rng = np.random.default_rng(cfg.seed)
    texture = rng.uniform(50.0, 200.0, size=(3, 1, height, width))
    pixels = np.broadcast_to(texture, (3, cfg.frames, height, width)).copy()
    pixels += drift[None, :, None, None]
    pixels += (CHANNEL_PULSE_GAIN[:, None, None, None]
               * cfg.amplitude * wave[None, :, None, None]
               * mask[None, None, :, :])
    if cfg.noise_sigma > 0:
        pixels += rng.normal(0.0, cfg.noise_sigma, size=pixels.shape)
    return SynthSample(video=VideoClip(pixels=pixels, fs=cfg.fs),
                       gt_signal=wave, gt_hr=float(cfg.hr_bpm))


def augment_flip(clip: VideoClip) -> VideoClip:
    """Reverse the width axis."""
    return VideoClip(pixels=clip.pixels[:, :, :, ::-1].copy(), fs=clip.fs)


def augment_temporal_resample(clip: VideoClip, gt_signal: np.ndarray, factor: float,
                              hr_bpm: float, min_frames: int = 2
                              ) -> tuple[VideoClip, np.ndarray, float]:
    """Linearly resample video and signal along T by ``factor``.

    Stretching time by ``factor`` scales every frequency by 1/factor, so
    the label becomes hr/factor; a label that leaves [42, 180] rejects
    the draw (callers resample the factor).
    """
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"resample factor must lie in [0.5, 2], got {factor}")
    frames = clip.frames
    if gt_signal.shape[0] != frames:
        raise ValueError(f"signal length {gt_signal.shape[0]} != clip frames {frames}")
    new_hr = hr_bpm / factor
    if not HR_FLOOR <= new_hr <= HR_CEIL:
        raise ValueError(f"resampled heart rate {new_hr:.1f} bpm leaves [{HR_FLOOR}, {HR_CEIL}]")
    new_frames = int(round(frames * factor))
    if new_frames < min_frames:
        raise ValueError(f"resampled length {new_frames} below minimum {min_frames}")
    positions = np.minimum(np.arange(new_frames, dtype=np.float64) / factor, frames - 1)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, frames - 1)
    frac = positions - lo
    pixels = (clip.pixels[:, lo] * (1.0 - frac)[None, :, None, None]
              + clip.pixels[:, hi] * frac[None, :, None, None])
    signal = gt_signal[lo] * (1.0 - frac) + gt_signal[hi] * frac
    # clamp away float fuzz at the boundaries
    new_hr = float(np.clip(new_hr, HR_FLOOR, HR_CEIL))
    return VideoClip(pixels=pixels, fs=clip.fs), signal, new_hr


def random_config(rng: np.random.Generator, fs: float = 30.0, frames: int = 300,
                  size: tuple[int, int] = (32, 32),
                  hr_range: tuple[float, float] = (48.0, 150.0),
                  amplitude: float = 2.0, noise_sigma: float = 0.5,
                  drift_amp: float = 1.0, hr_jitter: float = 0.02) -> SynthConfig:
    """Draw a sample config with a randomly placed elliptical mask.

    Labels stay inside [48, 150] to keep the Gaussian label target away
    from the class-range boundaries; masks land anywhere that keeps at
    least 10% coverage.
    """
    hr = float(rng.integers(int(hr_range[0]), int(hr_range[1]) + 1))
    for _ in range(100):
        mask = MaskSpec(
            kind="ellipse",
            center=(float(rng.uniform(0.30, 0.70)), float(rng.uniform(0.30, 0.70))),
            radius=(float(rng.uniform(0.20, 0.30)), float(rng.uniform(0.20, 0.30))))
        if mask.rasterize(*size).mean() >= 0.10:
            break
    return SynthConfig(hr_bpm=hr, fs=fs, frames=frames, size=size, mask=mask,
                       amplitude=amplitude, noise_sigma=noise_sigma,
                       drift_amp=drift_amp, drift_period=float(rng.uniform(4.0, 9.0)),
                       hr_jitter=hr_jitter, seed=int(rng.integers(0, 2 ** 31)))
