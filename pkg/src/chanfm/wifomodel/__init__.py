"""Masked-autoencoder channel model: patching, positional codes, masking, network, checkpoints."""

import numpy as np

from .checkpoint import Checkpoint, ParamCount, param_count
from .masking import MASK_KINDS, MaskSpec, masked_count, sample_mask
from .model import (
    ModelConfig,
    WiFoModel,
    init_params,
    mae_loss,
    param_shapes,
    predict,
    task_mask,
    task_region,
)
from .patching import PatchSpec, patchify, rms_normalize, stack_along_time, token_coords, unpatchify
from .posenc import stf_pos_encode


def encode_scene_token(scene, model: WiFoModel) -> np.ndarray:
    """Scene-token vector [decoder_dim] for one SceneRecord or raw [P, 5] array."""
    arr = scene.as_array() if hasattr(scene, "as_array") else np.asarray(scene)
    return model.scene_token(arr[None]).data[0]


__all__ = [
    "Checkpoint",
    "MASK_KINDS",
    "MaskSpec",
    "ModelConfig",
    "ParamCount",
    "PatchSpec",
    "WiFoModel",
    "encode_scene_token",
    "init_params",
    "mae_loss",
    "masked_count",
    "param_count",
    "param_shapes",
    "patchify",
    "predict",
    "rms_normalize",
    "sample_mask",
    "stack_along_time",
    "stf_pos_encode",
    "task_mask",
    "task_region",
    "token_coords",
    "unpatchify",
]
