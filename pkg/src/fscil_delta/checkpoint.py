"""Binary checkpoint formats. All integers and floats are little-endian.

Tensor record::

    u32 ndim | u32 itemsize (4 = float32, 8 = float64) | ndim x u64 dims | payload

Encoder checkpoint::

    8s  magic  b"FSCLENC\\0"
    u32 version (1)
    10 x i64 config: image_size, channels, patch_size, embed_dim, depth, heads,
                     mlp_hidden, adapted_blocks, update_target (0 qkv, 1 mlp),
                     share_updates (0/1)
    u32 tensor count
    tensor records in ``EncoderModel.named_parameters()`` order:
        patch_w, patch_b, cls_token, pos_embed,
        per block: ln1_gain, ln1_shift, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
                   ln2_gain, ln2_shift, w_1, b_1, w_2, b_2
        then the additive updates sorted by key

Classifier export::

    8s  magic  b"FSCLCLS\\0"
    u32 version (1)
    f64 temperature
    u64 rows | u64 dim | u32 itemsize
    rows x (i64 class_id | dim floats)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ContractError

ENCODER_MAGIC = b"FSCLENC\0"
CLASSIFIER_MAGIC = b"FSCLCLS\0"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    itemsize = array.dtype.itemsize
    if itemsize not in _DTYPES or not np.issubdtype(array.dtype, np.floating):
        raise ContractError(f"unsupported tensor dtype {array.dtype}")
    fh.write(struct.pack("<II", array.ndim, itemsize))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_DTYPES[itemsize]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError("truncated checkpoint")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    ndim, itemsize = struct.unpack("<II", _read_exact(fh, 8))
    if itemsize not in _DTYPES:
        raise ContractError(f"unsupported tensor itemsize {itemsize}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, count * itemsize)
    return np.frombuffer(payload, dtype=_DTYPES[itemsize]).reshape(shape).astype(_DTYPES[itemsize].newbyteorder("="))


def _config_ints(config) -> tuple[int, ...]:
    from .encoder import UpdateTarget

    return (
        config.image_size, config.channels, config.patch_size, config.embed_dim, config.depth,
        config.heads, config.mlp_hidden, config.adapted_blocks,
        0 if config.update_target is UpdateTarget.ATTENTION_QKV else 1,
        int(config.share_updates),
    )


def save_encoder(model, path: str | Path) -> None:
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(ENCODER_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<10q", *_config_ints(model.config)))
        fh.write(struct.pack("<I", len(params)))
        for _, tensor in params:
            write_tensor(fh, tensor.data)


def load_encoder(path: str | Path):
    from .encoder import AdditiveUpdates, EncoderConfig, EncoderModel, UpdateTarget, init_backbone

    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != ENCODER_MAGIC:
            raise ContractError(f"{path} is not an encoder checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        ints = struct.unpack("<10q", _read_exact(fh, 80))
        config = EncoderConfig(
            image_size=ints[0], channels=ints[1], patch_size=ints[2], embed_dim=ints[3], depth=ints[4],
            heads=ints[5], mlp_hidden=ints[6], adapted_blocks=ints[7],
            update_target=UpdateTarget.ATTENTION_QKV if ints[8] == 0 else UpdateTarget.MLP,
            share_updates=bool(ints[9]),
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = [read_tensor(fh) for _ in range(count)]
    dtype = arrays[0].dtype
    model = EncoderModel(config, init_backbone(config, 0, dtype), AdditiveUpdates.zeros(config, dtype))
    slots = model.named_parameters()
    if len(slots) != count:
        raise ContractError(f"checkpoint holds {count} tensors, config implies {len(slots)}")
    for (name, tensor), array in zip(slots, arrays):
        if tensor.shape != array.shape:
            raise ContractError(f"{name}: checkpoint shape {array.shape} != expected {tensor.shape}")
        tensor.data = array
    return model


def save_classifier(state, path: str | Path) -> None:
    weights = np.asarray(state.weights)
    itemsize = weights.dtype.itemsize
    with open(path, "wb") as fh:
        fh.write(CLASSIFIER_MAGIC)
        fh.write(struct.pack("<Id", VERSION, state.temperature))
        fh.write(struct.pack("<QQI", weights.shape[0], weights.shape[1], itemsize))
        for cid, row in zip(state.class_ids, weights):
            fh.write(struct.pack("<q", cid))
            fh.write(np.ascontiguousarray(row, dtype=_DTYPES[itemsize]).tobytes())


def load_classifier(path: str | Path):
    from .classifier import ClassifierState

    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CLASSIFIER_MAGIC:
            raise ContractError(f"{path} is not a classifier export")
        version, temperature = struct.unpack("<Id", _read_exact(fh, 12))
        if version != VERSION:
            raise ContractError(f"unsupported classifier version {version}")
        rows, dim, itemsize = struct.unpack("<QQI", _read_exact(fh, 20))
        ids, weights = [], np.empty((rows, dim), dtype=_DTYPES[itemsize])
        for r in range(rows):
            ids.append(struct.unpack("<q", _read_exact(fh, 8))[0])
            weights[r] = np.frombuffer(_read_exact(fh, dim * itemsize), dtype=_DTYPES[itemsize])
    return ClassifierState(weights.astype(_DTYPES[itemsize].newbyteorder("=")), tuple(ids), temperature)
