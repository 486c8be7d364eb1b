"""Patch-transformer segmenter: weights, initialisation, forward pass, weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DimensionError, FormatError, NonFiniteError, TruncatedFileError
from ..raster import Frame, MaskMap, ProbMap, pad_replicate

LN_EPS = 1e-5
MAGIC = b"MEMSEG1\n"


@dataclass(frozen=True)
class SegmenterConfig:
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    classes: int = 103  # food classes, background excluded
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.layers < 1 or self.heads < 1 or self.embed_dim < 1:
            raise ConfigError(f"invalid segmenter config {self}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.classes < 1 or self.mlp_ratio < 1:
            raise ConfigError(f"invalid segmenter config {self}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def n_out(self) -> int:
        return self.classes + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


LAYER_FIELDS = [f.name for f in fields(LayerWeights)]


@dataclass
class SegmenterWeights:
    config: SegmenterConfig
    grid_w: int
    grid_h: int
    wp: np.ndarray
    bp: np.ndarray
    pos: np.ndarray
    layers: list[LayerWeights]
    ws: np.ndarray
    bs: np.ndarray

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All learnable tensors in declaration (and file) order."""
        out = [("wp", self.wp), ("bp", self.bp), ("pos", self.pos)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", getattr(layer, name)) for name in LAYER_FIELDS)
        out.extend([("ws", self.ws), ("bs", self.bs)])
        return out

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.named_tensors()]

    def expected_shapes(self) -> list[tuple[int, ...]]:
        c = self.config
        d, m = c.embed_dim, c.hidden_dim
        layer = [(d,), (d,), (d, d), (d, d), (d, d), (d, d), (d,), (d,), (m, d), (m,), (d, m), (d,)]
        return [(d, c.patch_dim), (d,), (self.grid_h * self.grid_w, d)] + layer * c.layers + [
            (c.n_out, d),
            (c.n_out,),
        ]

    def validate(self) -> None:
        shapes = [t.shape for t in self.tensors()]
        if len(self.layers) != self.config.layers or shapes != self.expected_shapes():
            raise DimensionError("weight tensor shapes disagree with the segmenter config")

    def copy(self) -> "SegmenterWeights":
        return from_tensors(self.config, self.grid_w, self.grid_h, [t.copy() for t in self.tensors()])

    def pos_for(self, grid_w: int, grid_h: int) -> np.ndarray:
        """Positional table for a grid, bilinearly resampled when it differs
        from the stored grid."""
        if (grid_w, grid_h) == (self.grid_w, self.grid_h):
            return self.pos
        return pos_interp_matrix(self.grid_w, self.grid_h, grid_w, grid_h) @ self.pos


def from_tensors(config: SegmenterConfig, grid_w: int, grid_h: int, tensors: list[np.ndarray]) -> SegmenterWeights:
    wp, bp, pos = tensors[:3]
    n = len(LAYER_FIELDS)
    layers = [
        LayerWeights(*tensors[3 + i * n : 3 + (i + 1) * n]) for i in range(config.layers)
    ]
    ws, bs = tensors[3 + config.layers * n :]
    w = SegmenterWeights(config, grid_w, grid_h, wp, bp, pos, layers, ws, bs)
    w.validate()
    return w


def init_weights(config: SegmenterConfig, grid_w: int = 8, grid_h: int = 8) -> SegmenterWeights:
    """Seeded Glorot-uniform matrices, zero biases, unit layer-norm scales and
    N(0, 0.02) positional embeddings. Draw order follows declaration order."""
    if grid_w < 1 or grid_h < 1:
        raise ConfigError("positional grid must be at least 1x1")
    rng = np.random.default_rng(config.seed)
    d, m = config.embed_dim, config.hidden_dim

    def glorot(rows, cols):
        s = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-s, s, size=(rows, cols))

    wp = glorot(d, config.patch_dim)
    bp = np.zeros(d)
    pos = rng.normal(0.0, 0.02, size=(grid_h * grid_w, d))
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                ln1_g=np.ones(d),
                ln1_b=np.zeros(d),
                wq=glorot(d, d),
                wk=glorot(d, d),
                wv=glorot(d, d),
                wo=glorot(d, d),
                ln2_g=np.ones(d),
                ln2_b=np.zeros(d),
                w1=glorot(m, d),
                b1=np.zeros(m),
                w2=glorot(d, m),
                b2=np.zeros(d),
            )
        )
    ws = glorot(config.n_out, d)
    bs = np.zeros(config.n_out)
    return SegmenterWeights(config, grid_w, grid_h, wp, bp, pos, layers, ws, bs)


# --------------------------------------------------------------------------- positional resampling


def _bilinear_1d(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix with aligned end points."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    if n_out == 1:
        x = np.array([(n_in - 1) / 2.0])
    else:
        x = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(x).astype(int), n_in - 2)
    frac = x - lo
    rows = np.arange(n_out)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    return a


def pos_interp_matrix(grid_w: int, grid_h: int, new_w: int, new_h: int) -> np.ndarray:
    """Matrix mapping a row-major (grid_h*grid_w) table to (new_h*new_w) rows."""
    if new_w < 1 or new_h < 1:
        raise DimensionError(f"target grid must be at least 1x1, got {new_w}x{new_h}")
    return np.kron(_bilinear_1d(grid_h, new_h), _bilinear_1d(grid_w, new_w))


def interpolate_pos(weights: SegmenterWeights, new_grid_w: int, new_grid_h: int) -> SegmenterWeights:
    m = pos_interp_matrix(weights.grid_w, weights.grid_h, new_grid_w, new_grid_h)
    tensors = [t.copy() for t in weights.tensors()]
    tensors[2] = m @ weights.pos
    return from_tensors(weights.config, new_grid_w, new_grid_h, tensors)


# --------------------------------------------------------------------------- forward pass


@dataclass
class PatchSequence:
    """Row-major patch grid; ``vectors`` has shape (..., grid_h*grid_w, dim)."""

    grid_w: int
    grid_h: int
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[-2] != self.grid_w * self.grid_h:
            raise DimensionError(
                f"{self.vectors.shape[-2]} vectors for a {self.grid_w}x{self.grid_h} grid"
            )

    @property
    def n(self) -> int:
        return self.grid_w * self.grid_h


def padded_size(width: int, height: int, p: int) -> tuple[int, int]:
    return -(-width // p) * p, -(-height // p) * p


def partition(frame: Frame, p: int) -> PatchSequence:
    h, w = frame.height, frame.width
    if h % p or w % p:
        raise DimensionError(f"frame {w}x{h} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = frame.data.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
    return PatchSequence(gw, gh, x.reshape(gh * gw, p * p * 3) / 255.0)


def partition_padded(frame: Frame, p: int) -> PatchSequence:
    return partition(pad_replicate(frame, *padded_size(frame.width, frame.height, p)), p)


def embed(patches: PatchSequence, weights: SegmenterWeights) -> PatchSequence:
    if patches.vectors.shape[-1] != weights.config.patch_dim:
        raise DimensionError(
            f"patch dim {patches.vectors.shape[-1]} != {weights.config.patch_dim}"
        )
    pos = weights.pos_for(patches.grid_w, patches.grid_h)
    z = patches.vectors @ weights.wp.T + weights.bp + pos
    return PatchSequence(patches.grid_w, patches.grid_h, z)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def block_forward(z: np.ndarray, lw: LayerWeights, heads: int, cache: dict | None = None) -> np.ndarray:
    """One pre-norm block: attention sub-layer then GELU MLP, both residual."""
    h1, xhat1, inv1 = layer_norm(z, lw.ln1_g, lw.ln1_b)
    q = split_heads(h1 @ lw.wq.T, heads)
    k = split_heads(h1 @ lw.wk.T, heads)
    v = split_heads(h1 @ lw.wv.T, heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    o = merge_heads(attn @ v)
    z1 = z + o @ lw.wo.T

    h2, xhat2, inv2 = layer_norm(z1, lw.ln2_g, lw.ln2_b)
    u = h2 @ lw.w1.T + lw.b1
    a = gelu(u)
    z2 = z1 + a @ lw.w2.T + lw.b2
    if cache is not None:
        cache.update(
            h1=h1, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, attn=attn, o=o,
            h2=h2, xhat2=xhat2, inv2=inv2, u=u, a=a, scale=scale,
        )
    return z2


def encode(z0: PatchSequence, weights: SegmenterWeights, caches: list | None = None) -> PatchSequence:
    z = z0.vectors
    for i, lw in enumerate(weights.layers):
        cache = {} if caches is not None else None
        z = block_forward(z, lw, weights.config.heads, cache)
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite activations after encoder layer {i}")
        if caches is not None:
            caches.append(cache)
    return PatchSequence(z0.grid_w, z0.grid_h, z)


def decode(zl: PatchSequence, weights: SegmenterWeights) -> PatchSequence:
    logits = zl.vectors @ weights.ws.T + weights.bs
    return PatchSequence(zl.grid_w, zl.grid_h, softmax(logits))


def upsample_to_maps(dist: PatchSequence, width: int, height: int, p: int) -> tuple[ProbMap, MaskMap]:
    """Nearest-neighbour block replication of per-patch distributions, cropped
    to the frame; the mask is the per-pixel argmax (ties -> lowest class)."""
    if dist.grid_w * p < width or dist.grid_h * p < height:
        raise DimensionError("patch grid does not cover the frame")
    grid = dist.vectors.reshape(dist.grid_h, dist.grid_w, -1)
    full = np.repeat(np.repeat(grid, p, axis=0), p, axis=1)[:height, :width]
    probs = ProbMap(full)
    mask = MaskMap(np.argmax(grid, axis=2))
    mask_full = np.repeat(np.repeat(mask.data, p, axis=0), p, axis=1)[:height, :width]
    return probs, MaskMap(mask_full)


def features(frame: Frame, weights: SegmenterWeights) -> PatchSequence:
    """Final encoder activations for a frame (pad, partition, embed, encode)."""
    return encode(embed(partition_padded(frame, weights.config.patch_size), weights), weights)


def features_batch(frames: list[Frame], weights: SegmenterWeights) -> PatchSequence:
    """Encoder outputs for equally sized frames in one vectorised pass;
    ``vectors`` has shape (T, N, D)."""
    p = weights.config.patch_size
    seqs = [partition_padded(f, p) for f in frames]
    if len({(s.grid_w, s.grid_h) for s in seqs}) != 1:
        raise DimensionError("batched frames must share dimensions")
    stacked = PatchSequence(seqs[0].grid_w, seqs[0].grid_h, np.stack([s.vectors for s in seqs]))
    return encode(embed(stacked, weights), weights)


def segment(frame: Frame, weights: SegmenterWeights) -> tuple[ProbMap, MaskMap]:
    dist = decode(features(frame, weights), weights)
    return upsample_to_maps(dist, frame.width, frame.height, weights.config.patch_size)


def patch_majority(mask: MaskMap, p: int, n_classes: int) -> np.ndarray:
    """Majority class of every patch (ties -> lowest index), padding by edge
    replication like the frames. Returns (grid_h*grid_w,) ints."""
    pw, ph = padded_size(mask.width, mask.height, p)
    m = np.pad(mask.data, ((0, ph - mask.height), (0, pw - mask.width)), mode="edge")
    if int(m.max()) >= n_classes:
        raise DimensionError(f"mask index {int(m.max())} >= {n_classes} classes")
    gh, gw = ph // p, pw // p
    blocks = m.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
    counts = np.zeros((gh * gw, n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(gh * gw), p * p), blocks.ravel()), 1)
    return np.argmax(counts, axis=1)


# --------------------------------------------------------------------------- weight files


_CONFIG_KEYS = ("patch_size", "embed_dim", "layers", "heads", "classes", "mlp_ratio", "seed")


def save_weights(weights: SegmenterWeights, path) -> None:
    c = weights.config
    ints = [getattr(c, k) for k in _CONFIG_KEYS] + [weights.grid_w, weights.grid_h]
    parts = [MAGIC, struct.pack("<9Q", *ints)]
    parts.extend(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in weights.tensors())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path, expected: SegmenterConfig | None = None) -> SegmenterWeights:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a memseg weight file (bad magic)")
    off = len(MAGIC)
    if len(buf) < off + 72:
        raise TruncatedFileError(f"{path}: truncated config block")
    ints = struct.unpack_from("<9Q", buf, off)
    off += 72
    config = SegmenterConfig(**dict(zip(_CONFIG_KEYS, ints[:7])))
    grid_w, grid_h = ints[7:]
    if grid_w < 1 or grid_h < 1:
        raise FormatError(f"{path}: invalid positional grid {grid_w}x{grid_h}")
    if expected is not None and expected != config:
        diffs = [k for k in _CONFIG_KEYS if getattr(expected, k) != getattr(config, k)]
        raise ConfigError(f"{path}: config mismatch in {', '.join(diffs)}")
    shell = SegmenterWeights(config, grid_w, grid_h, *([None] * 3), [None] * config.layers, None, None)
    tensors = []
    for shape in shell.expected_shapes():
        count = int(np.prod(shape))
        if len(buf) < off + 8 * count:
            raise TruncatedFileError(f"{path}: truncated tensor section")
        tensors.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return from_tensors(config, grid_w, grid_h, tensors)

