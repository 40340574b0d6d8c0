"""Binary file formats and manifests.

Checkpoint ("PHYF"): magic, version u32, tensor count u32, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the
payload as little-endian float64, row-major.

Sample ("PHYD"): magic, C/T/H/W as u32, fs and the heart-rate label as
f32, the signal length as u32, then the ground-truth signal and the
video tensor as little-endian float32, row-major.

Manifests are plain text, one "path<TAB>heart_rate" line per sample;
relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .synth import SynthSample, VideoClip

__all__ = [
    "CHECKPOINT_MAGIC",
    "SAMPLE_MAGIC",
    "save_tensors",
    "load_tensors",
    "write_sample",
    "read_sample",
    "write_manifest",
    "read_manifest",
]

CHECKPOINT_MAGIC = b"PHYF"
CHECKPOINT_VERSION = 1
SAMPLE_MAGIC = b"PHYD"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to a checkpoint file."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors)))
        for name, array in tensors.items():
            array = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:40]}...")
            if array.ndim > 255:
                raise ValueError(f"tensor rank {array.ndim} exceeds format limit")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint file back into named float64 arrays."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sII", fh.read(12))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if rank else 1
            payload = fh.read(8 * size)
            if len(payload) != 8 * size:
                raise ValueError(f"{path}: truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        return out


def write_sample(path, sample: SynthSample) -> None:
    """Write one synthetic recording (video, signal, label) as float32."""
    path = Path(path)
    pixels = np.ascontiguousarray(sample.video.pixels, dtype="<f4")
    signal = np.ascontiguousarray(sample.gt_signal, dtype="<f4")
    c, t, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIffI", SAMPLE_MAGIC, c, t, h, w,
                             float(sample.video.fs), float(sample.gt_hr), len(signal)))
        fh.write(signal.tobytes())
        fh.write(pixels.tobytes())


def read_sample(path) -> SynthSample:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIIIffI"))
        magic, c, t, h, w, fs, gt_hr, sig_len = struct.unpack("<4sIIIIffI", header)
        if magic != SAMPLE_MAGIC:
            raise ValueError(f"{path}: not a sample file (magic {magic!r})")
        signal = np.frombuffer(fh.read(4 * sig_len), dtype="<f4").astype(np.float64)
        pixels = np.frombuffer(fh.read(4 * c * t * h * w), dtype="<f4")
        if pixels.size != c * t * h * w:
            raise ValueError(f"{path}: truncated video payload")
        pixels = pixels.reshape(c, t, h, w).astype(np.float64)
    return SynthSample(video=VideoClip(pixels=pixels, fs=float(fs)),
                       gt_signal=signal, gt_hr=float(gt_hr))


def write_manifest(path, entries: list[tuple[str, float]]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rel_path, hr in entries:
            fh.write(f"{rel_path}\t{hr:.6g}\n")


def read_manifest(path) -> list[tuple[Path, float]]:
    """Sample paths (resolved against the manifest directory) and labels."""
    path = Path(path)
    base = path.parent
    out: list[tuple[Path, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rel, hr = line.rsplit("\t", 1)
            except ValueError:
                raise ValueError(f"{path}:{line_no}: expected 'path<TAB>heart_rate'") from None
            sample_path = Path(rel)
            if not sample_path.is_absolute():
                sample_path = base / sample_path
            out.append((sample_path, float(hr)))
    return out
