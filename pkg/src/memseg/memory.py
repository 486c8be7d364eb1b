"""Short/long-term key-value memory and softmax-attention mask propagation.

Keys are encoder features of a frame on its patch grid; values are per-patch
class distributions. A read attends from every query location to every
(entry, location) slot held in either store.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError
from .raster import Frame, MaskMap, ProbMap
from .segmenter.model import (
    PatchSequence,
    SegmenterWeights,
    features,
    patch_majority,
    upsample_to_maps,
)


SIMILARITIES = ("l2", "dot")
VALUE_MODES = ("mask", "read")


@dataclass(frozen=True)
class MemoryParams:
    stm_cap: int = 5
    ltm_stride: int = 5
    ltm_cap: int = 64
    similarity: str = "l2"
    value_mode: str = "mask"  # what a propagated frame stores: its decoded mask or the raw read

    def __post_init__(self):
        if self.stm_cap < 1 or self.ltm_stride < 1 or self.ltm_cap < 1:
            raise ValueError(f"memory parameters must be positive: {self}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.value_mode not in VALUE_MODES:
            raise ValueError(f"unknown value mode {self.value_mode!r}")


@dataclass(eq=False)
class FeatureMap:
    grid_w: int
    grid_h: int
    vectors: np.ndarray  # (grid_h*grid_w, D)
    frame: int

    def __post_init__(self):
        if self.vectors.shape[0] != self.grid_w * self.grid_h:
            raise DimensionError("feature count does not match grid")
        self.sq_norms = np.einsum("ij,ij->i", self.vectors, self.vectors)


@dataclass(eq=False)
class MemoryEntry:
    key: FeatureMap
    value: np.ndarray  # (grid_h*grid_w, C+1), rows are distributions
    pinned: bool = False

    def __post_init__(self):
        if self.value.shape[0] != self.key.vectors.shape[0]:
            raise DimensionError("key and value grids differ")
        self.support = np.flatnonzero(self.value.any(axis=0))

    @property
    def frame(self) -> int:
        return self.key.frame

    @property
    def grid(self) -> tuple[int, int]:
        return self.key.grid_w, self.key.grid_h


@dataclass
class AttentionRead:
    grid_w: int
    grid_h: int
    scores: np.ndarray  # (N_query, S)
    weights: np.ndarray  # (N_query, S)
    read: np.ndarray  # (N_query, C+1)


class MemoryBank:
    """STM: the ``stm_cap`` most recently inserted entries.
    LTM: every ``ltm_stride``-th frame plus pinned seeds, oldest unpinned
    entry evicted beyond ``ltm_cap``. Both stores are kept sorted by frame."""

    def __init__(self, params: MemoryParams = MemoryParams()):
        self.params = params
        self.stm: list[MemoryEntry] = []
        self.ltm: list[MemoryEntry] = []
        self._age: dict[int, int] = {}  # frame -> STM insertion tick
        self._tick = 0
        self.grid: tuple[int, int] | None = None

    def __len__(self):
        return len(self.slots_entries())

    def _check_grid(self, entry: MemoryEntry) -> None:
        if self.grid is None:
            self.grid = entry.grid
        elif entry.grid != self.grid:
            raise DimensionError(f"entry grid {entry.grid} differs from bank grid {self.grid}")

    @staticmethod
    def _put(store: list[MemoryEntry], entry: MemoryEntry) -> None:
        store[:] = [e for e in store if e.frame != entry.frame]
        store.append(entry)
        store.sort(key=lambda e: e.frame)

    def _push_stm(self, entry: MemoryEntry) -> None:
        self._put(self.stm, entry)
        self._tick += 1
        self._age[entry.frame] = self._tick
        while len(self.stm) > self.params.stm_cap:
            oldest = min(self.stm, key=lambda e: self._age[e.frame])
            self.stm.remove(oldest)
            del self._age[oldest.frame]

    def _trim_ltm(self) -> None:
        while len(self.ltm) > self.params.ltm_cap:
            unpinned = [e for e in self.ltm if not e.pinned]
            if not unpinned:
                break
            self.ltm.remove(unpinned[0])

    def seed(self, entry: MemoryEntry) -> None:
        """Insert an annotated frame into both stores; it is never evicted from LTM."""
        self._check_grid(entry)
        entry.pinned = True
        self._push_stm(entry)
        self._put(self.ltm, entry)
        self._trim_ltm()

    def insert(self, entry: MemoryEntry) -> None:
        self._check_grid(entry)
        self._push_stm(entry)
        if entry.frame % self.params.ltm_stride == 0:
            if any(e.pinned and e.frame == entry.frame for e in self.ltm):
                return
            self._put(self.ltm, entry)
            self._trim_ltm()

    def slots_entries(self) -> list[MemoryEntry]:
        """Entries of STM and LTM, one per frame index, sorted by frame."""
        by_frame = {e.frame: e for e in self.stm}
        by_frame.update({e.frame: e for e in self.ltm})
        return [by_frame[f] for f in sorted(by_frame)]


def attention_read(query: FeatureMap, bank: MemoryBank) -> AttentionRead:
    entries = bank.slots_entries()
    if not entries:
        raise EmptyInputError("attention read on an empty memory bank")
    if bank.grid != (query.grid_w, query.grid_h):
        raise DimensionError(f"query grid {(query.grid_w, query.grid_h)} differs from bank grid {bank.grid}")
    keys = np.concatenate([e.key.vectors for e in entries])
    if keys.shape[1] != query.vectors.shape[1]:
        raise DimensionError("query and key feature dimensions differ")
    key_sq = np.concatenate([e.key.sq_norms for e in entries])
    # Classes absent from every stored value read as exactly zero; skip them.
    cols = np.unique(np.concatenate([e.support for e in entries]))
    values = np.concatenate([e.value[:, cols] for e in entries])
    read = read_slots(query.vectors, keys, values, bank.params.similarity, query.grid_w, query.grid_h, key_sq)
    full = np.zeros((read.read.shape[0], entries[0].value.shape[1]))
    full[:, cols] = read.read
    read.read = full
    return read


def similarity(q: np.ndarray, keys: np.ndarray, kind: str = "l2", key_sq: np.ndarray | None = None) -> np.ndarray:
    """(N_query, S) similarity scores, scaled by 1/sqrt(D).

    ``dot`` is the plain inner product. ``l2`` is the negative squared
    Euclidean distance, i.e. the inner product corrected by each key's norm;
    it is not biased towards large-norm keys.
    """
    if kind not in SIMILARITIES:
        raise ValueError(f"unknown similarity {kind!r}")
    scores = q @ keys.T
    if kind == "l2":
        if key_sq is None:
            key_sq = np.einsum("ij,ij->i", keys, keys)
        scores *= 2.0
        scores -= key_sq
        scores -= np.einsum("ij,ij->i", q, q)[:, None]
    scores /= np.sqrt(q.shape[1])
    return scores


def attention_weights(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax over slots, stabilised by subtracting the row maximum."""
    alpha = np.exp(scores - scores.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    return alpha


def read_slots(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    kind: str = "l2",
    grid_w: int = 0,
    grid_h: int = 0,
    key_sq: np.ndarray | None = None,
) -> AttentionRead:
    """Similarity, max-subtracted softmax over slots, convex read of values."""
    scores = similarity(q, keys, kind, key_sq)
    alpha = attention_weights(scores)
    return AttentionRead(grid_w, grid_h, scores, alpha, alpha @ values)


def decode_read(read: AttentionRead, width: int, height: int, p: int) -> tuple[ProbMap, MaskMap]:
    return upsample_to_maps(PatchSequence(read.grid_w, read.grid_h, read.read), width, height, p)


def decode_mask(read: AttentionRead, width: int, height: int, p: int) -> MaskMap:
    """Hard mask of a read without materialising the pixel-level ProbMap.

    Replication commutes with argmax, so this equals ``decode_read(...)[1]``.
    """
    cls = np.argmax(read.read, axis=1).reshape(read.grid_h, read.grid_w)
    return MaskMap(np.repeat(np.repeat(cls, p, 0), p, 1)[:height, :width])


def extract_features(frame: Frame, weights: SegmenterWeights, t: int = 0) -> FeatureMap:
    z = features(frame, weights)
    return FeatureMap(z.grid_w, z.grid_h, z.vectors, t)


def seed_value(mask: MaskMap, p: int, n_classes: int) -> np.ndarray:
    """One-hot patch-grid value from the majority class of each patch."""
    return np.eye(n_classes)[patch_majority(mask, p, n_classes)]


def quantize_mask(mask: MaskMap, p: int, n_classes: int) -> MaskMap:
    """The mask a patch-grid one-hot seed decodes to at full resolution."""
    gw, gh = -(-mask.width // p), -(-mask.height // p)
    cls = patch_majority(mask, p, n_classes).reshape(gh, gw)
    return MaskMap(np.repeat(np.repeat(cls, p, 0), p, 1)[: mask.height, : mask.width])


def propagate(
    frames: Sequence[Frame],
    seeds: Mapping[int, MaskMap],
    weights: SegmenterWeights,
    params: MemoryParams = MemoryParams(),
    on_frame: Callable[[int, float], None] | None = None,
) -> list[MaskMap]:
    """Masks for every frame from the seeded ones.

    A propagated frame enters memory with its decoded mask as one-hot value
    (``value_mode="mask"``) or with the raw read distribution (``"read"``).
    ``on_frame(t, ms)`` receives each frame's extract/read/decode/insert time.
    """
    if not seeds:
        raise EmptyInputError("propagation needs at least one seed mask")
    if not frames:
        raise EmptyInputError("propagation needs at least one frame")
    if len({(f.width, f.height) for f in frames}) != 1:
        raise DimensionError("frames in a sequence must share dimensions")
    bad = [t for t in seeds if not 0 <= t < len(frames)]
    if bad:
        raise DimensionError(f"seed indices out of range: {bad}")
    width, height = frames[0].width, frames[0].height
    for t, m in seeds.items():
        if (m.width, m.height) != (width, height):
            raise DimensionError(f"seed mask {t} does not match frame dimensions")

    p = weights.config.patch_size
    n_classes = weights.config.n_out
    keys = {t: extract_features(frames[t], weights, t) for t in sorted(seeds)}
    seed_values = {t: seed_value(m, p, n_classes) for t, m in seeds.items()}

    bank = MemoryBank(params)
    for t in sorted(seeds):
        bank.seed(MemoryEntry(keys[t], seed_values[t]))

    out: list[MaskMap] = []
    for t in range(len(frames)):
        start = time.perf_counter()
        if t in seeds:
            # refresh recency so the seed counts as the newest short-term entry
            bank.seed(MemoryEntry(keys[t], seed_values[t]))
            out.append(seeds[t])
        else:
            key = extract_features(frames[t], weights, t)
            read = attention_read(key, bank)
            mask = decode_mask(read, width, height, p)
            if params.value_mode == "mask":
                value = np.eye(n_classes)[np.argmax(read.read, axis=1)]
            else:
                value = read.read
            bank.insert(MemoryEntry(key, value))
            out.append(mask)
        assert len(bank.stm) <= params.stm_cap
        if on_frame is not None:
            on_frame(t, (time.perf_counter() - start) * 1000.0)
    return out
