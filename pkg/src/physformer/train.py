"""Training loop, Adam optimizer, evaluation protocol, checkpointing.

One step samples a random temporal crop from each recording in the
batch (with horizontal-flip and temporal-resample augmentation),
runs a training-mode forward, applies the scheduled loss, and takes an
Adam step with plain L2 weight decay folded into the gradient. The loss
breakdown of every step lands in a CSV log; a checkpoint (parameters,
batch-norm buffers, optimizer moments, epoch, generator state) is
written after every epoch.

Evaluation splits each recording into ceil(duration/clip) evenly spaced
clips (3 x 10 s at the defaults), estimates a heart rate per clip from
the predicted signal's spectrum, and averages clip rates into one
recording-level estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import formats
from .config import RunConfig
from .losses import LossBreakdown, beta_at, overall_loss
from .metrics import MetricSet, estimate_hr, metric_set
from .model import PhysFormer
from .synth import SynthSample, VideoClip, augment_flip, augment_temporal_resample
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Adam",
    "TrainingDivergedError",
    "TrainResult",
    "train",
    "evaluate_model",
    "evaluate_predictor",
    "save_checkpoint",
    "load_checkpoint",
    "load_samples",
    "iter_samples",
]

FLIP_PROB = 0.5
RESAMPLE_PROB = 0.25
RESAMPLE_RANGE = (0.8, 1.25)

LOG_COLUMNS = ("epoch", "step", "l_time", "l_ce", "l_ld", "alpha", "beta", "l_total")


class TrainingDivergedError(RuntimeError):
    """The loss left the finite range; message carries step diagnostics."""


class Adam:
    """Adam with plain L2 decay added to the gradient before the moments."""

    def __init__(self, named_params: dict[str, Tensor], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moment1 = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.moment2 = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        corr1 = 1.0 - self.beta1 ** self.steps
        corr2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                continue
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            m = self.moment1[name]
            v = self.moment2[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.moment1.items()}
        out.update({f"optim.v.{k}": v for k, v in self.moment2.items()})
        out["optim.steps"] = np.array([float(self.steps)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.moment1:
            self.moment1[k][...] = arrays[f"optim.m.{k}"]
            self.moment2[k][...] = arrays[f"optim.v.{k}"]
        self.steps = int(arrays["optim.steps"][0])


# -- checkpoint plumbing ---------------------------------------------------


def _encode_rng(rng: np.random.Generator) -> np.ndarray:
    """Pack a PCG64 generator state into sixteen 16-bit limbs plus extras."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError(f"only PCG64 generators checkpoint, got {state['bit_generator']}")

    def limbs(value: int) -> list[float]:
        return [float((value >> (16 * i)) & 0xFFFF) for i in range(8)]

    return np.array(limbs(state["state"]["state"]) + limbs(state["state"]["inc"])
                    + [float(state["has_uint32"]), float(state["uinteger"])])


def _decode_rng(vec: np.ndarray) -> np.random.Generator:
    ints = [int(round(v)) for v in vec]

    def join(parts: list[int]) -> int:
        return sum(part << (16 * i) for i, part in enumerate(parts))

    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": join(ints[:8]), "inc": join(ints[8:16])},
        "has_uint32": ints[16],
        "uinteger": ints[17],
    }
    return rng


def save_checkpoint(path, model: PhysFormer, optimizer: Adam | None = None,
                    epoch: int = 0, rng: np.random.Generator | None = None) -> None:
    tensors = dict(model.state())
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    tensors["meta.epoch"] = np.array([float(epoch)])
    if rng is not None:
        tensors["meta.rng"] = _encode_rng(rng)
    formats.save_tensors(path, tensors)


def load_checkpoint(path, model: PhysFormer, optimizer: Adam | None = None
                    ) -> tuple[int, np.random.Generator | None]:
    arrays = formats.load_tensors(path)
    model.load_state({k: v for k, v in arrays.items()
                      if not k.startswith(("optim.", "meta."))})
    if optimizer is not None:
        optimizer.load_state_arrays(arrays)
    epoch = int(arrays["meta.epoch"][0]) if "meta.epoch" in arrays else 0
    rng = _decode_rng(arrays["meta.rng"]) if "meta.rng" in arrays else None
    return epoch, rng


# -- data feeding ----------------------------------------------------------


def load_samples(manifest_path) -> list[SynthSample]:
    entries = formats.read_manifest(manifest_path)
    if not entries:
        raise ValueError(f"manifest {manifest_path} is empty")
    return [formats.read_sample(path) for path, _ in entries]


def iter_samples(manifest_path) -> Iterable[SynthSample]:
    """Stream samples one at a time (evaluation-sized recordings are large)."""
    entries = formats.read_manifest(manifest_path)
    if not entries:
        raise ValueError(f"manifest {manifest_path} is empty")
    for path, _ in entries:
        yield formats.read_sample(path)


def sample_training_clip(rng: np.random.Generator, sample: SynthSample,
                         clip_frames: int, augment: bool = True
                         ) -> tuple[np.ndarray, np.ndarray, float]:
    """Random temporal crop plus augmentation; returns (pixels, signal, hr)."""
    total = sample.video.frames
    if total < clip_frames:
        raise ValueError(f"recording has {total} frames, need {clip_frames}")
    resample = augment and rng.random() < RESAMPLE_PROB
    flip = augment and rng.random() < FLIP_PROB
    if resample:
        lo = max(2, int(round(clip_frames / RESAMPLE_RANGE[1])))
        hi = min(total, int(round(clip_frames / RESAMPLE_RANGE[0])))
        length = int(rng.integers(lo, hi + 1)) if hi >= lo else clip_frames
    else:
        length = clip_frames
    start = int(rng.integers(0, total - length + 1))
    pixels = sample.video.pixels[:, start:start + length]
    signal = sample.gt_signal[start:start + length]
    hr = sample.gt_hr
    clip = VideoClip(pixels=pixels, fs=sample.video.fs)
    if resample and length != clip_frames:
        try:
            clip, signal, hr = augment_temporal_resample(
                clip, signal, clip_frames / length, hr, min_frames=clip_frames)
        except ValueError:
            clip = VideoClip(pixels=pixels[:, :clip_frames], fs=sample.video.fs)
            signal = signal[:clip_frames]
            hr = sample.gt_hr
    if flip:
        clip = augment_flip(clip)
    return np.ascontiguousarray(clip.pixels[:, :clip_frames]), signal[:clip_frames], hr


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: PhysFormer
    history: list[dict]
    log_path: Path | None
    checkpoint_paths: list[Path]

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoint_paths[-1] if self.checkpoint_paths else None


def _format_row(row: dict) -> str:
    return ",".join(repr(row[col]) if isinstance(row[col], float) else str(row[col])
                    for col in LOG_COLUMNS)


def train(cfg: RunConfig, out_dir=None, samples: Sequence[SynthSample] | None = None,
          augment: bool = True, ld_target: str = "gaussian") -> TrainResult:
    """Train a model from scratch; deterministic in (config, data).

    ``samples`` bypasses the manifest (used by tests); otherwise
    ``cfg.train_manifest`` is loaded. With ``out_dir`` set, the loss log
    and per-epoch checkpoints are written there.
    """
    if cfg.schedule.total_epochs != cfg.epochs:
        cfg = replace(cfg, schedule=replace(cfg.schedule, total_epochs=cfg.epochs))
    if samples is None:
        if not cfg.train_manifest:
            raise ValueError("no training manifest configured and no samples passed")
        samples = load_samples(cfg.train_manifest)
    if not samples:
        raise ValueError("training set is empty")
    fs = samples[0].video.fs
    if any(s.video.fs != fs for s in samples):
        raise ValueError("all training recordings must share one frame rate")
    clip_frames = int(round(cfg.clip_seconds * fs))
    if clip_frames < 2:
        raise ValueError(f"clip of {cfg.clip_seconds}s at fs={fs} is too short")

    rng = np.random.default_rng(cfg.seed)
    model = PhysFormer(cfg.arch, rng)
    optimizer = Adam(dict(model.named_parameters()), cfg.lr, cfg.weight_decay)

    out_path = Path(out_dir) if out_dir is not None else None
    log_handle = None
    log_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_path = out_path / "train_log.csv"
        log_handle = open(log_path, "w", encoding="utf-8")
        log_handle.write(",".join(LOG_COLUMNS) + "\n")

    history: list[dict] = []
    checkpoints: list[Path] = []
    global_step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch_ids = order[lo:lo + cfg.batch_size]
                clips, signals, hrs = [], [], []
                for idx in batch_ids:
                    px, sig, hr = sample_training_clip(rng, samples[idx], clip_frames, augment)
                    clips.append(px)
                    signals.append(sig)
                    hrs.append(hr)
                batch = Tensor(np.stack(clips))
                predicted, _ = model.forward(batch, training=True)
                length = predicted.shape[1]
                total = None
                sums = {"l_time": 0.0, "l_ce": 0.0, "l_ld": 0.0}
                for i in range(len(batch_ids)):
                    loss_i, parts = overall_loss(
                        predicted[i], signals[i][:length], hrs[i], fs,
                        epoch, cfg.schedule, sigma=cfg.sigma, ld_target=ld_target)
                    total = loss_i if total is None else total + loss_i
                    for key in sums:
                        sums[key] += getattr(parts, key)
                scale = 1.0 / len(batch_ids)
                total = total * scale
                global_step += 1
                alpha = cfg.schedule.alpha
                beta = beta_at(epoch, cfg.schedule)
                mean_time = sums["l_time"] * scale
                mean_ce = sums["l_ce"] * scale
                mean_ld = sums["l_ld"] * scale
                row = {
                    "epoch": epoch, "step": global_step,
                    "l_time": mean_time, "l_ce": mean_ce, "l_ld": mean_ld,
                    "alpha": alpha, "beta": beta,
                    "l_total": alpha * mean_time + beta * (mean_ce + mean_ld),
                }
                if not math.isfinite(row["l_total"]):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {global_step}: "
                        f"time={mean_time} ce={mean_ce} ld={mean_ld} beta={beta}")
                optimizer.zero_grad()
                backward(total)
                optimizer.step()
                history.append(row)
                if log_handle is not None:
                    log_handle.write(_format_row(row) + "\n")
            if log_handle is not None:
                log_handle.flush()
            if out_path is not None:
                ckpt = out_path / f"checkpoint_epoch{epoch:03d}.phyf"
                save_checkpoint(ckpt, model, optimizer, epoch, rng)
                checkpoints.append(ckpt)
    finally:
        if log_handle is not None:
            log_handle.close()
    return TrainResult(model=model, history=history, log_path=log_path,
                       checkpoint_paths=checkpoints)


# -- evaluation --------------------------------------------------------------


def evaluate_predictor(predict: Callable[[np.ndarray, float], np.ndarray],
                       samples: Iterable[SynthSample], cfg: RunConfig,
                       report_path=None) -> tuple[MetricSet, list[tuple[int, float, float]]]:
    """Clip-average heart-rate evaluation of an arbitrary signal predictor.

    ``predict`` maps a (3, T, H, W) pixel array and frame rate to a 1-d
    signal. Each recording is split into ceil(duration/clip) evenly
    spaced clips whose estimates are averaged.
    """
    rows: list[tuple[int, float, float]] = []
    for index, sample in enumerate(samples):
        fs = sample.video.fs
        clip_frames = int(round(cfg.eval_clip_seconds * fs))
        total = sample.video.frames
        if total < clip_frames:
            raise ValueError(
                f"recording {index} is shorter ({total} frames) than one eval clip ({clip_frames})")
        count = math.ceil(total / clip_frames)
        if count == 1:
            starts = [0]
        else:
            starts = np.round(np.linspace(0, total - clip_frames, count)).astype(int).tolist()
        clip_rates = []
        for start in starts:
            signal = predict(sample.video.pixels[:, start:start + clip_frames], fs)
            clip_rates.append(estimate_hr(signal, fs).hr_bpm)
        rows.append((index, float(sample.gt_hr), float(np.mean(clip_rates))))
    metrics = metric_set([r[2] for r in rows], [r[1] for r in rows])
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write("recording,gt_hr,pred_hr\n")
            for rid, gt, pred in rows:
                fh.write(f"{rid},{gt:.6g},{pred:.6g}\n")
            r_text = "nan" if metrics.r is None else f"{metrics.r:.6g}"
            fh.write(f"# aggregate sd={metrics.sd:.6g} mae={metrics.mae:.6g} "
                     f"rmse={metrics.rmse:.6g} r={r_text}\n")
    return metrics, rows


def evaluate_model(model: PhysFormer, samples: Iterable[SynthSample], cfg: RunConfig,
                   report_path=None) -> tuple[MetricSet, list[tuple[int, float, float]]]:
    """Evaluate a trained network in eval mode (running-stat batch norm)."""

    def predict(pixels: np.ndarray, fs: float) -> np.ndarray:
        with no_grad():
            signal, _ = model.forward(Tensor(pixels[None]), training=False)
        return signal.data[0]

    return evaluate_predictor(predict, samples, cfg, report_path)
