"""Synthetic data for tests, demos, and the bundled experiments.

Two generators:

* smooth random spectrograms, for overfit/shape checks that need
  spectrogram-like arrays without any audio plumbing;
* a labeled corpus of band-limited noise clips (class = frequency
  band), easy enough to learn at desk scale yet still rewarding a
  representation that captures where the energy lives.

Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import ManifestEntry, write_manifest, write_wav

__all__ = [
    "synthetic_spectrograms",
    "BandCorpusConfig",
    "band_noise_clip",
    "make_band_corpus",
    "write_band_corpus",
]


def synthetic_spectrograms(n: int, n_mels: int, n_frames: int, seed: int = 0) -> np.ndarray:
    """Smooth standardized arrays of shape (n, n_mels, n_frames).

    White noise blurred along both axes with short box filters, then
    shifted/scaled to zero mean and unit variance per clip.
    """
    if n < 1 or n_mels < 1 or n_frames < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    out = rng.normal(size=(n, n_mels, n_frames))
    kernel = np.ones(5) / 5.0
    for i in range(n):
        for ax in (0, 1):
            out[i] = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), ax, out[i])
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= out.std(axis=(1, 2), keepdims=True) + 1e-8
    return out.astype(np.float32)


@dataclass(frozen=True)
class BandCorpusConfig:
    n_classes: int = 4
    clips_per_class: int = 16
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    fmin: float = 200.0
    fmax: float = 7000.0
    snr_db: float = 5.0
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")


def _class_band(cfg: BandCorpusConfig, label: int) -> tuple[float, float]:
    # log-spaced, slightly overlapping bands across [fmin, fmax]
    edges = np.geomspace(cfg.fmin, cfg.fmax, cfg.n_classes + 1)
    lo, hi = edges[label], edges[label + 1]
    width = hi - lo
    return max(cfg.fmin, lo - 0.15 * width), min(cfg.fmax, hi + 0.15 * width)


def band_noise_clip(cfg: BandCorpusConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    """One waveform for ``label``: band-passed noise plus broadband noise.

    The band-pass is an ideal mask in the rFFT domain; the in-band
    component is RMS-normalized and broadband noise is mixed in at
    ``snr_db``.  Peak-limited to 0.9 so 16-bit export never clips.
    """
    if not 0 <= label < cfg.n_classes:
        raise ValueError(f"label {label} outside 0..{cfg.n_classes - 1}")
    n = int(round(cfg.clip_seconds * cfg.sample_rate))
    lo, hi = _class_band(cfg, label)
    spectrum = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, d=1.0 / cfg.sample_rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    signal = np.fft.irfft(spectrum, n=n)
    signal /= np.sqrt(np.mean(signal**2)) + 1e-12
    noise = rng.normal(size=n)
    noise /= np.sqrt(np.mean(noise**2)) + 1e-12
    mix = signal + noise * 10.0 ** (-cfg.snr_db / 20.0)
    mix *= 0.25 / (np.sqrt(np.mean(mix**2)) + 1e-12)
    peak = np.abs(mix).max()
    if peak > 0.9:
        mix *= 0.9 / peak
    return mix


def make_band_corpus(cfg: BandCorpusConfig) -> list[tuple[np.ndarray, int, str]]:
    """All clips as ``(waveform, label, split)``; splits interleave evenly."""
    rng = np.random.default_rng(cfg.seed)
    test_every = max(2, int(round(1.0 / cfg.test_fraction)))
    out = []
    for label in range(cfg.n_classes):
        for i in range(cfg.clips_per_class):
            split = "test" if (i % test_every) == (test_every - 1) else "train"
            out.append((band_noise_clip(cfg, label, rng), label, split))
    return out


def write_band_corpus(out_dir, cfg: BandCorpusConfig) -> Path:
    """Write WAVs plus a ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for idx, (waveform, label, split) in enumerate(make_band_corpus(cfg)):
        rel = f"wav/class{label}_{idx:04d}.wav"
        write_wav(out_dir / rel, waveform, rate=cfg.sample_rate)
        entries.append(ManifestEntry(path=rel, label=str(label), split=split))
    return write_manifest(out_dir / "manifest.csv", entries)
