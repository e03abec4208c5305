"""Patch grid utilities: tokenization, mask sampling, and positional encodings.

A 2-D input (spectrogram or image) is cut into non-overlapping square
patches, flattened into a token sequence, and split into mutually
exclusive visible/masked index sets.  Everything here is a pure function
of its arguments; mask sampling takes an explicit seed.

Token layout convention (used everywhere downstream): tokens are stored
in row-major grid order with the frequency/height axis major and the
time/width axis minor, i.e. token ``i`` covers grid cell
``(i // n_time, i % n_time)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InputGrid",
    "ShapeSpec",
    "PatchSequence",
    "MaskPlan",
    "partition",
    "unpatch",
    "sample_mask",
    "positional_encoding",
    "select",
]


@dataclass(frozen=True)
class InputGrid:
    """A 2-D input as a ``(channels, height, width)`` array.

    ``kind`` is "spectrogram" (1 channel, height = mel bins) or "image"
    (3 channels).
    """

    values: np.ndarray
    kind: str = "spectrogram"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValueError(f"expected (channels, height, width), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("input grid contains non-finite values")
        if self.kind not in ("spectrogram", "image"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ShapeSpec:
    """Patch grid geometry plus the encoder width the tokens will meet.

    ``n_freq``/``n_time`` count patches along the height/width axes
    (frequency and time for spectrograms).
    """

    patch_size: int
    n_freq: int
    n_time: int
    dim: int

    def __post_init__(self):
        if self.patch_size < 1 or self.n_freq < 1 or self.n_time < 1:
            raise ValueError("patch_size, n_freq, n_time must all be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.n_freq * self.n_time

    @classmethod
    def for_grid(cls, height: int, width: int, patch_size: int, dim: int) -> "ShapeSpec":
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"grid {height}x{width} is not divisible by patch size {patch_size} "
                f"(remainders {height % patch_size}, {width % patch_size})"
            )
        return cls(patch_size, height // patch_size, width // patch_size, dim)


@dataclass(frozen=True)
class PatchSequence:
    """Flattened patch tokens in row-major grid order.

    ``tokens`` has shape ``(n_patches, patch_size**2 * channels)``; row
    ``i`` holds the pixels of grid cell ``(i // n_time, i % n_time)``,
    flattened channel-major so that ``unpatch`` is an exact inverse.
    """

    tokens: np.ndarray
    shape: ShapeSpec
    channels: int
    kind: str = "spectrogram"

    def __post_init__(self):
        expected = (self.shape.n_patches, self.shape.patch_size**2 * self.channels)
        if self.tokens.shape != expected:
            raise ValueError(f"tokens shape {self.tokens.shape} != expected {expected}")

    @property
    def patch_dim(self) -> int:
        return self.tokens.shape[1]


def partition(grid: InputGrid, patch_size: int, dim: int = 1) -> PatchSequence:
    """Cut ``grid`` into ``patch_size`` x ``patch_size`` tokens.

    ``dim`` is carried along in the ShapeSpec for downstream consumers
    (positional encodings and encoders); it does not affect the tokens.
    Raises ValueError when grid dims are not divisible by ``patch_size``.
    """
    c, h, w = grid.values.shape
    spec = ShapeSpec.for_grid(h, w, patch_size, dim)
    p = patch_size
    # (c, nf, p, nt, p) -> (nf, nt, c, p, p) -> (nf*nt, c*p*p)
    cells = grid.values.reshape(c, spec.n_freq, p, spec.n_time, p)
    tokens = cells.transpose(1, 3, 0, 2, 4).reshape(spec.n_patches, c * p * p)
    return PatchSequence(np.ascontiguousarray(tokens), spec, channels=c, kind=grid.kind)


def unpatch(seq: PatchSequence) -> InputGrid:
    """Exact inverse of :func:`partition`."""
    p = seq.shape.patch_size
    nf, nt, c = seq.shape.n_freq, seq.shape.n_time, seq.channels
    cells = seq.tokens.reshape(nf, nt, c, p, p)
    values = cells.transpose(2, 0, 3, 1, 4).reshape(c, nf * p, nt * p)
    return InputGrid(np.ascontiguousarray(values), kind=seq.kind)


@dataclass(frozen=True)
class MaskPlan:
    """Disjoint, exhaustive split of token indices into visible/masked sets.

    ``visible`` has exactly ``floor(n * (1 - ratio))`` sorted indices and
    ``masked`` holds the rest.
    """

    ratio: float
    visible: np.ndarray
    masked: np.ndarray
    rng_seed: int

    @property
    def n_tokens(self) -> int:
        return len(self.visible) + len(self.masked)


def sample_mask(n: int, ratio: float, seed: int) -> MaskPlan:
    """Sample a uniform-without-replacement mask plan over ``n`` tokens.

    Keeps ``floor(n * (1 - ratio))`` tokens visible.  Same seed, same plan.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0, 1], got {ratio}")
    if n < 1:
        raise ValueError(f"need at least one token, got n={n}")
    n_visible = int(np.floor(n * (1.0 - ratio)))
    perm = np.random.default_rng(seed).permutation(n)
    visible = np.sort(perm[:n_visible])
    masked = np.sort(perm[n_visible:])
    return MaskPlan(ratio=ratio, visible=visible, masked=masked, rng_seed=seed)


def positional_encoding(shape: ShapeSpec) -> np.ndarray:
    """Fixed 2-D sinusoidal positions, one row per token, ``shape.dim`` wide.

    The first half of each row encodes the time/width index, the second
    half the frequency/height index; each half is a standard 1-D
    sine/cosine embedding ([sines | cosines], base period 10000).  Pure
    function of the shape: repeated calls are byte-identical.
    """
    d = shape.dim
    if d % 4 != 0:
        raise ValueError(f"encoder width must be divisible by 4 for the axis split, got {d}")
    freq_idx, time_idx = np.meshgrid(
        np.arange(shape.n_freq, dtype=np.float64),
        np.arange(shape.n_time, dtype=np.float64),
        indexing="ij",
    )
    half_t = _sincos_1d(d // 2, time_idx.reshape(-1))
    half_f = _sincos_1d(d // 2, freq_idx.reshape(-1))
    return np.concatenate([half_t, half_f], axis=1)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    bands = np.arange(dim // 2, dtype=np.float64) / (dim // 2)
    inv_period = 1.0 / 10000.0**bands
    angles = np.outer(positions, inv_period)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def select(seq, indices) -> np.ndarray:
    """Pick rows of a per-token array; row ``k`` of the output is row
    ``indices[k]`` of the input.

    ``seq`` may be a :class:`PatchSequence` (its token rows are used) or
    any (n, d) array.  ``indices`` must be sorted, unique, and in range.
    An empty index list yields an empty array with the column count
    preserved.
    """
    rows = seq.tokens if isinstance(seq, PatchSequence) else np.asarray(seq)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= rows.shape[0]:
            raise IndexError(
                f"index out of range: valid [0, {rows.shape[0]}), got "
                f"[{idx.min()}, {idx.max()}]"
            )
        if np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be sorted and unique")
    return rows[idx]
