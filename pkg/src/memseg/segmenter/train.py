"""Cross-entropy loss, reverse-mode gradients and the momentum SGD trainer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DimensionError, NonFiniteError
from ..raster import Frame, MaskMap
from .model import (
    LAYER_FIELDS,
    SegmenterWeights,
    embed,
    encode,
    merge_heads,
    partition_padded,
    patch_majority,
    pos_interp_matrix,
    softmax,
    split_heads,
)


@dataclass
class TrainState:
    max_iter: int
    iter: int = 0
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def for_weights(cls, weights: SegmenterWeights, max_iter: int, **kwargs) -> "TrainState":
        return cls(max_iter=max_iter, velocity=[np.zeros_like(t) for t in weights.tensors()], **kwargs)


def lr_schedule(state: TrainState) -> float:
    """Polynomial decay: base_lr * (1 - iter/max_iter) ** 0.9."""
    if state.max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= state.iter <= state.max_iter:
        raise ConfigError(f"iter {state.iter} outside [0, {state.max_iter}]")
    return state.base_lr * (1.0 - state.iter / state.max_iter) ** state.power


def _ln_backward(dy, xhat, inv, g):
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_grad(u):
    cdf = 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return cdf + u * pdf


def _block_backward(dz, lw, cache, heads):
    """Backpropagate through one pre-norm block. Returns (dz_in, grads dict)."""
    g = {}
    # MLP sub-layer: z2 = z1 + gelu(h2 W1^T + b1) W2^T + b2
    a, u, h2 = cache["a"], cache["u"], cache["h2"]
    g["w2"] = dz.T @ a
    g["b2"] = dz.sum(axis=0)
    du = (dz @ lw.w2) * _gelu_grad(u)
    g["w1"] = du.T @ h2
    g["b1"] = du.sum(axis=0)
    dh2 = du @ lw.w1
    dx, g["ln2_g"], g["ln2_b"] = _ln_backward(dh2, cache["xhat2"], cache["inv2"], lw.ln2_g)
    dz1 = dz + dx

    # attention sub-layer: z1 = z + merge(softmax(q k^T * s) v) Wo^T
    g["wo"] = dz1.T @ cache["o"]
    do = split_heads(dz1 @ lw.wo, heads)
    attn, q, k, v, s = cache["attn"], cache["q"], cache["k"], cache["v"], cache["scale"]
    dattn = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ do
    dscore = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * s
    dq = dscore @ k
    dk = np.swapaxes(dscore, -1, -2) @ q
    dq, dk, dv = merge_heads(dq), merge_heads(dk), merge_heads(dv)
    h1 = cache["h1"]
    g["wq"], g["wk"], g["wv"] = dq.T @ h1, dk.T @ h1, dv.T @ h1
    dh1 = dq @ lw.wq + dk @ lw.wk + dv @ lw.wv
    dx, g["ln1_g"], g["ln1_b"] = _ln_backward(dh1, cache["xhat1"], cache["inv1"], lw.ln1_g)
    return dz1 + dx, g


def patch_targets(gt: MaskMap, weights: SegmenterWeights) -> np.ndarray:
    return patch_majority(gt, weights.config.patch_size, weights.config.n_out)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(weights: SegmenterWeights, frame: Frame, gt: MaskMap) -> float:
    """Mean per-patch cross-entropy, forward pass only."""
    if (gt.width, gt.height) != (frame.width, frame.height):
        raise DimensionError("ground truth and frame dimensions differ")
    targets = patch_targets(gt, weights)
    zl = encode(embed(partition_padded(frame, weights.config.patch_size), weights), weights)
    log_probs = _log_softmax(zl.vectors @ weights.ws.T + weights.bs)
    return float(-np.mean(log_probs[np.arange(len(targets)), targets]))


def loss_and_grads(weights: SegmenterWeights, frame: Frame, gt: MaskMap) -> tuple[float, list[np.ndarray]]:
    """Mean per-patch cross-entropy against the majority ground-truth class
    and its gradient for every tensor, ordered like ``weights.tensors()``."""
    if (gt.width, gt.height) != (frame.width, frame.height):
        raise DimensionError("ground truth and frame dimensions differ")
    targets = patch_targets(gt, weights)
    patches = partition_padded(frame, weights.config.patch_size)
    z0 = embed(patches, weights)
    caches: list[dict] = []
    zl = encode(z0, weights, caches)
    logits = zl.vectors @ weights.ws.T + weights.bs
    probs = softmax(logits)
    n = len(targets)
    value = float(-np.mean(_log_softmax(logits)[np.arange(n), targets]))
    if not np.isfinite(value):
        raise NonFiniteError("non-finite training loss")

    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    d_ws = dlogits.T @ zl.vectors
    d_bs = dlogits.sum(axis=0)
    dz = dlogits @ weights.ws

    layer_grads = []
    for i in reversed(range(len(weights.layers))):
        dz, g = _block_backward(dz, weights.layers[i], caches[i], weights.config.heads)
        layer_grads.append(g)
    layer_grads.reverse()

    d_wp = dz.T @ patches.vectors
    d_bp = dz.sum(axis=0)
    if (patches.grid_w, patches.grid_h) == (weights.grid_w, weights.grid_h):
        d_pos = dz
    else:
        d_pos = pos_interp_matrix(weights.grid_w, weights.grid_h, patches.grid_w, patches.grid_h).T @ dz

    grads = [d_wp, d_bp, d_pos]
    for g in layer_grads:
        grads.extend(g[name] for name in LAYER_FIELDS)
    grads.extend([d_ws, d_bs])
    return value, grads


def sgd_update(weights: SegmenterWeights, state: TrainState, grads: list[np.ndarray], lr: float) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(t) for t in weights.tensors()]
    for w, v, g in zip(weights.tensors(), state.velocity, grads):
        v *= state.momentum
        v -= lr * (g + state.weight_decay * w)
        w += v


def train_step(weights: SegmenterWeights, state: TrainState, frame: Frame, gt: MaskMap):
    """One SGD step, updating ``weights`` and ``state`` in place.

    Returns ``(weights, state, loss)`` where ``loss`` is measured before the update.
    """
    if state.iter >= state.max_iter:
        raise ConfigError(f"training already finished ({state.iter}/{state.max_iter})")
    lr = lr_schedule(state)
    value, grads = loss_and_grads(weights, frame, gt)
    sgd_update(weights, state, grads, lr)
    state.iter += 1
    return weights, state, value
