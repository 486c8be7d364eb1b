"""Transformer patch segmenter and its trainer."""

from .model import (
    PatchSequence,
    SegmenterConfig,
    SegmenterWeights,
    decode,
    embed,
    encode,
    features,
    features_batch,
    init_weights,
    interpolate_pos,
    load_weights,
    partition,
    partition_padded,
    patch_majority,
    save_weights,
    segment,
    upsample_to_maps,
)
from .train import TrainState, loss, loss_and_grads, lr_schedule, sgd_update, train_step

__all__ = [
    "PatchSequence",
    "SegmenterConfig",
    "SegmenterWeights",
    "TrainState",
    "decode",
    "embed",
    "encode",
    "features",
    "features_batch",
    "init_weights",
    "interpolate_pos",
    "load_weights",
    "loss_and_grads",
    "loss",
    "lr_schedule",
    "partition",
    "partition_padded",
    "patch_majority",
    "save_weights",
    "segment",
    "sgd_update",
    "train_step",
    "upsample_to_maps",
]
