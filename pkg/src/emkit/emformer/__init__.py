"""Toy EMFormer: multi-conv attention blocks in a pruning/recovering stack."""
from emkit.emformer.layers import ParamInit, attention, mha, window_merge, window_partition
from emkit.emformer.block import WINDOWS, BlockConfig, cross_attention, emformer_block, init_block
from emkit.emformer.model import (
    Checkpoint,
    ModelConfig,
    encode_decode,
    init_model,
    load_checkpoint,
    pair_tokens,
    patch_embed,
    save_checkpoint,
    unpair_tokens,
    unpatch,
)

__all__ = [
    "WINDOWS",
    "BlockConfig",
    "Checkpoint",
    "ModelConfig",
    "ParamInit",
    "attention",
    "cross_attention",
    "emformer_block",
    "encode_decode",
    "init_block",
    "init_model",
    "load_checkpoint",
    "mha",
    "pair_tokens",
    "patch_embed",
    "save_checkpoint",
    "unpair_tokens",
    "unpatch",
    "window_merge",
    "window_partition",
]
