"""DCT perceptual hashing and greedy near-duplicate keyframe selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError
from .raster import Frame, GrayRaster, resize_area, to_grayscale

HASH_SIZE = 8
REDUCED_SIZE = 32
DEFAULT_THRESHOLD = 12

# AC coefficients below this fraction of the largest magnitude are rounding noise
_SNAP = 1e-9


@dataclass(frozen=True)
class PerceptualHash:
    """64 bits, coefficient 0 (the DC term) in the most significant bit."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < 1 << 64:
            raise ValueError("perceptual hash must fit in 64 bits")

    def __sub__(self, other: "PerceptualHash") -> int:
        return hamming(self, other)

    def __str__(self):
        return f"{self.bits:016x}"


@dataclass
class KeyframeSelection:
    kept: list[int]
    threshold: int = DEFAULT_THRESHOLD
    hashes: list[PerceptualHash] = field(default_factory=list, repr=False)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; ``dct_matrix(n) @ x`` transforms a length-n signal."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT32 = dct_matrix(REDUCED_SIZE)


def dct2(block: np.ndarray) -> np.ndarray:
    if block.shape != (REDUCED_SIZE, REDUCED_SIZE):
        m_rows, m_cols = dct_matrix(block.shape[0]), dct_matrix(block.shape[1])
    else:
        m_rows = m_cols = _DCT32
    return m_rows @ block @ m_cols.T


def hash_coefficients(coeffs: np.ndarray) -> PerceptualHash:
    """Threshold an 8x8 coefficient block against its own median."""
    flat = np.asarray(coeffs, dtype=np.float64).ravel()
    scale = np.abs(flat).max()
    if scale > 0:
        flat = np.where(np.abs(flat) <= _SNAP * scale, 0.0, flat)
    bits = flat > np.median(flat)
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return PerceptualHash(value)


def phash_gray(g: GrayRaster) -> PerceptualHash:
    small = resize_area(g, REDUCED_SIZE, REDUCED_SIZE).data
    return hash_coefficients(dct2(small)[:HASH_SIZE, :HASH_SIZE])


def phash(frame: Frame) -> PerceptualHash:
    return phash_gray(to_grayscale(frame))


def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    return (a.bits ^ b.bits).bit_count()


def dedup_hashes(hashes: Sequence[PerceptualHash], threshold: int = DEFAULT_THRESHOLD) -> list[int]:
    """Greedy temporal scan: keep a frame only if it is farther than
    ``threshold`` from every frame kept so far."""
    if not hashes:
        raise EmptyInputError("dedup needs at least one frame")
    kept: list[int] = []
    for t, h in enumerate(hashes):
        if all(hamming(h, hashes[k]) > threshold for k in kept):
            kept.append(t)
    return kept


def dedup(frames: Iterable[Frame], threshold: int = DEFAULT_THRESHOLD) -> KeyframeSelection:
    hashes = [phash(f) for f in frames]
    return KeyframeSelection(dedup_hashes(hashes, threshold), threshold, hashes)
