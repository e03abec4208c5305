"""Log-mel front end and small audio utilities.

The DSP is written out explicitly (framing, periodic Hann window, real
FFT power spectrum, Slaney-style area-normalized mel filterbank, natural
log with an additive floor) so the numbers entering golden tests are
pinned by this file alone and cannot drift with a third-party library
upgrade.

Conventions: 16 kHz mono input, 25 ms window (400 samples), 10 ms hop
(160 samples), no center padding, so a clip of ``n`` samples yields
``1 + floor((n - 400) / 160)`` frames.  80 mel bands spanning 50 Hz to
8 kHz.  Normalization is a single scalar mean/std pair computed over a
training corpus via streaming sufficient statistics.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "AudioConfig",
    "DatasetStats",
    "StatsAccumulator",
    "mel_filterbank",
    "hz_to_mel",
    "mel_to_hz",
    "frame_count",
    "log_mel_spectrogram",
    "normalize",
    "crop_or_pad",
    "split_long",
    "read_wav",
    "write_wav",
    "ManifestEntry",
    "read_manifest",
    "write_manifest",
    "cache_spectrograms",
]


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    window_samples: int = 400
    hop_samples: int = 160
    n_mels: int = 80
    fmin: float = 50.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.window_samples <= 0 or self.hop_samples <= 0:
            raise ValueError("window and hop must be positive sample counts")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= Nyquist, got {self.fmin}..{self.fmax} "
                f"at {self.sample_rate} Hz"
            )

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


# ----- mel scale (Slaney variant: linear below 1 kHz, log above) ------------

_F_SP = 200.0 / 3.0
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOG_STEP = math.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / _F_SP
    above = hz >= _MIN_LOG_HZ
    mel = np.where(above, _MIN_LOG_MEL + np.log(np.maximum(hz, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOG_STEP, mel)
    return mel


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    hz = mel * _F_SP
    above = mel >= _MIN_LOG_MEL
    hz = np.where(above, _MIN_LOG_HZ * np.exp(_LOG_STEP * (mel - _MIN_LOG_MEL)), hz)
    return hz


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), area-normalized.

    Each filter is scaled by ``2 / (f_hi - f_lo)`` (the Slaney
    normalization), so filter areas are equal rather than peaks.
    """
    n_fft = cfg.window_samples
    fft_freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * cfg.sample_rate / n_fft
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((cfg.n_mels, fft_freqs.size), dtype=np.float64)
    for k in range(cfg.n_mels):
        lo, mid, hi = hz_pts[k], hz_pts[k + 1], hz_pts[k + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        bank[k] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return bank


# ----- spectrograms ----------------------------------------------------------


def frame_count(n_samples: int, cfg: AudioConfig) -> int:
    if n_samples < cfg.window_samples:
        raise ValueError(
            f"clip of {n_samples} samples is shorter than one {cfg.window_samples}-sample window"
        )
    return 1 + (n_samples - cfg.window_samples) // cfg.hop_samples


def log_mel_spectrogram(waveform: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Waveform (n_samples,) -> log-mel array of shape (n_mels, n_frames).

    Power spectrum of periodic-Hann-windowed frames, mel projection,
    then natural log of (power + floor).  No center padding: the first
    frame starts at sample 0 and trailing samples that do not fill a
    window are dropped.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {waveform.shape}")
    n_frames = frame_count(waveform.size, cfg)
    win, hop = cfg.window_samples, cfg.hop_samples
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = waveform[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel = power @ mel_filterbank(cfg).T
    return np.log(mel + cfg.log_floor).T.astype(np.float32)


# ----- corpus-level normalization -------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    """Scalar normalization statistics over a training corpus."""

    mean: float
    std: float
    count: int

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")


class StatsAccumulator:
    """Streaming sufficient statistics (count, sum, sum of squares)."""

    def __init__(self):
        self.count = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, spec: np.ndarray) -> None:
        arr = np.asarray(spec, dtype=np.float64)
        self.count += arr.size
        self.total += float(arr.sum())
        self.total_sq += float((arr * arr).sum())

    def finalize(self, eps: float = 1e-8) -> DatasetStats:
        if self.count == 0:
            raise ValueError("no data accumulated")
        mean = self.total / self.count
        var = max(0.0, self.total_sq / self.count - mean * mean)
        return DatasetStats(mean=mean, std=math.sqrt(var) + eps, count=self.count)


def normalize(spec: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return ((spec - stats.mean) / stats.std).astype(np.float32)


# ----- fitting clips to the model grid ---------------------------------------


def crop_or_pad(spec: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random n_frames window of a longer clip; zero-pad a shorter one.

    The crop start is drawn uniformly from the valid range using ``rng``,
    so callers control determinism by seeding.  Padding appends zero
    frames on the right (post-normalization zeros, i.e. corpus mean).
    """
    if spec.ndim != 2:
        raise ValueError(f"expected (n_mels, n_frames), got shape {spec.shape}")
    t = spec.shape[1]
    if t == n_frames:
        return spec
    if t > n_frames:
        start = int(rng.integers(0, t - n_frames + 1))
        return spec[:, start : start + n_frames]
    out = np.zeros((spec.shape[0], n_frames), dtype=spec.dtype)
    out[:, :t] = spec
    return out


def split_long(spec: np.ndarray, n_frames: int) -> list[tuple[np.ndarray, int]]:
    """Chop into non-overlapping n_frames segments, last one zero-padded.

    Returns ``(segment, valid_frames)`` pairs; ``valid_frames`` is how
    many columns of the segment are real data (for length-weighted
    pooling downstream).
    """
    if spec.ndim != 2:
        raise ValueError(f"expected (n_mels, n_frames), got shape {spec.shape}")
    if spec.shape[1] == 0:
        raise ValueError("cannot split an empty spectrogram")
    pieces = []
    for start in range(0, spec.shape[1], n_frames):
        chunk = spec[:, start : start + n_frames]
        valid = chunk.shape[1]
        if valid < n_frames:
            padded = np.zeros((spec.shape[0], n_frames), dtype=spec.dtype)
            padded[:, :valid] = chunk
            chunk = padded
        pieces.append((chunk, valid))
    return pieces


# ----- WAV files --------------------------------------------------------------


def read_wav(path, expect_rate: int | None = 16000) -> tuple[np.ndarray, int]:
    """Read a PCM WAV as float64 in [-1, 1); returns (mono waveform, rate).

    Supports 8/16/24/32-bit integer PCM.  Multi-channel files are
    averaged to mono.  There is no resampler: a rate other than
    ``expect_rate`` is an error (pass None to accept any rate).
    """
    path = Path(path)
    with wave.open(str(path), "rb") as wf:
        rate = wf.getframerate()
        n_channels = wf.getnchannels()
        width = wf.getsampwidth()
        raw = wf.readframes(wf.getnframes())
    if expect_rate is not None and rate != expect_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expect_rate} (no resampler)")
    if width == 1:
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        data = (data - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        vals = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
        data = vals.astype(np.float64) / float(1 << 23)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise ValueError(f"{path}: unsupported sample width {width} bytes")
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return data, rate


def write_wav(path, waveform: np.ndarray, rate: int = 16000) -> Path:
    """Write a mono float waveform as 16-bit PCM, clipping to [-1, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.round(np.asarray(waveform, dtype=np.float64) * 32768.0)
    ints = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(ints.tobytes())
    return path


# ----- manifests and the feature cache ----------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str = "train"


def read_manifest(path) -> list[ManifestEntry]:
    """CSV with a header row of ``path,label[,split]``."""
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs 'path' and 'label' columns")
        for row in reader:
            entries.append(ManifestEntry(row["path"], row["label"], row.get("split") or "train"))
    if not entries:
        raise ValueError(f"{path}: manifest has no rows")
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for e in entries:
            writer.writerow([e.path, e.label, e.split])
    return path


def cache_spectrograms(
    entries: list[ManifestEntry],
    cfg: AudioConfig,
    cache_dir,
    root=None,
) -> tuple[dict[str, Path], DatasetStats]:
    """Precompute log-mels for every manifest entry into ``cache_dir``.

    Cache keys bind the audio path to the front-end fingerprint, so a
    config change never reuses stale arrays.  Returns a path map plus
    scalar stats accumulated over the *train*-split entries only.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    root = Path(root) if root is not None else None
    acc = StatsAccumulator()
    paths: dict[str, Path] = {}
    for entry in entries:
        wav_path = (root / entry.path) if root is not None else Path(entry.path)
        key = hashlib.sha1(f"{entry.path}|{cfg.fingerprint()}".encode()).hexdigest()[:16]
        out = cache_dir / f"{Path(entry.path).stem}.{key}.npy"
        if out.exists():
            spec = np.load(out)
        else:
            wave_data, _ = read_wav(wav_path, expect_rate=cfg.sample_rate)
            spec = log_mel_spectrogram(wave_data, cfg)
            np.save(out, spec)
        if entry.split == "train":
            acc.add(spec)
        paths[entry.path] = out
    return paths, acc.finalize()
