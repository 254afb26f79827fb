"""Log-mel filterbank front end and fixed-length query inputs."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
PREEMPHASIS = 0.97
N_FFT = 512
F_MIN = 20.0
F_MAX = 7600.0


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_len_ms: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x D with T >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


@dataclass
class SegmentRef:
    source: FeatureMatrix
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError(f"empty segment [{self.start_frame}, {self.end_frame})")
        if self.start_frame < 0 or self.end_frame > self.source.num_frames:
            raise ValueError(
                f"segment [{self.start_frame}, {self.end_frame}) outside source of "
                f"{self.source.num_frames} frames"
            )

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(bins: int = 60, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), bins + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(
    bins: int = 60,
    sample_rate: int = 16000,
    n_fft: int = N_FFT,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular filters on the mel axis, shape [bins, n_fft // 2 + 1]."""
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), bins + 2)
    fft_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_mel - left) / (center - left)
    falling = (right - fft_mel) / (right - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def compute_fbank(
    w: Waveform,
    bins: int = 60,
    frame_len_ms: float = 25.0,
    frame_shift_ms: float = 10.0,
) -> FeatureMatrix:
    """Log-mel energies of pre-emphasised, Hamming-windowed frames."""
    frame_len = int(round(w.sample_rate * frame_len_ms / 1000.0))
    frame_shift = int(round(w.sample_rate * frame_shift_ms / 1000.0))
    n = w.samples.size
    if n < frame_len:
        raise InsufficientSamplesError(
            f"insufficient samples: {n} < one frame of {frame_len} samples"
        )
    n_fft = max(N_FFT, 1 << (frame_len - 1).bit_length())
    x = w.samples.astype(np.float64)
    x = np.concatenate([x[:1], x[1:] - PREEMPHASIS * x[:-1]])
    num_frames = (n - frame_len) // frame_shift + 1
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(num_frames)[:, None]
    frames = x[idx] * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(bins, w.sample_rate, n_fft, F_MIN, min(F_MAX, w.sample_rate / 2))
    energies = power @ fb.T
    return FeatureMatrix(
        np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32),
        frame_shift_ms=frame_shift_ms,
        frame_len_ms=frame_len_ms,
    )


def temporal_context_pad(seg: SegmentRef, frames: int) -> FeatureMatrix:
    """Exactly ``frames`` rows with the segment centred in its real surroundings.

    Context comes from the source matrix where it exists; beyond the source
    edges the nearest real frame is repeated. When the context split is odd the
    left side gets the extra frame. Segments longer than ``frames`` are
    centre-cropped.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    src = seg.source
    if seg.length >= frames:
        start = seg.start_frame + (seg.length - frames) // 2
    else:
        extra = frames - seg.length
        start = seg.start_frame - (extra - extra // 2)
    idx = np.clip(np.arange(start, start + frames), 0, src.num_frames - 1)
    return FeatureMatrix(src.frames[idx], src.frame_shift_ms, src.frame_len_ms)


# --- I/O ---------------------------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono audio is supported")
        raw = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def save_features(path: str | Path, fm: FeatureMatrix) -> None:
    """Write ``<path>`` as little-endian f32 plus a ``<path>.json`` sidecar."""
    path = Path(path)
    fm.frames.astype("<f4").tofile(path)
    meta = {
        "rows": fm.num_frames,
        "cols": fm.num_bins,
        "frame_shift_ms": fm.frame_shift_ms,
        "frame_len_ms": fm.frame_len_ms,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta))


def load_features(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    data = np.fromfile(path, dtype="<f4")
    if data.size != meta["rows"] * meta["cols"]:
        raise ValueError(
            f"{path}: blob holds {data.size} floats, sidecar says {meta['rows']}x{meta['cols']}"
        )
    return FeatureMatrix(
        data.reshape(meta["rows"], meta["cols"]),
        frame_shift_ms=meta["frame_shift_ms"],
        frame_len_ms=meta["frame_len_ms"],
    )
