"""Miniature ViT feature extractor with shared additive weight updates.

The backbone stands in for a pretrained ViT: it is drawn once from a seeded
Gaussian and never trained.  Adaptation happens only through zero-initialised
additive matrices that are summed onto the QKV projections (or, for the
ablation, onto the two MLP matrices) of the final ``adapted_blocks`` blocks,
plus the original biases of those projections.

Weights act on row vectors: a token ``h`` (row of the ``T x d`` sequence) is
projected as ``h @ (W_q + dW_q) + b_q``.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


class UpdateTarget(str, Enum):
    ATTENTION_QKV = "attention_qkv"
    MLP = "mlp"


ATTENTION_KEYS = ("q", "k", "v")
MLP_KEYS = ("w1", "w2")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 6
    heads: int = 4
    mlp_hidden: Optional[int] = None
    adapted_blocks: Optional[int] = None
    update_target: UpdateTarget = UpdateTarget.ATTENTION_QKV
    share_updates: bool = True

    def __post_init__(self):
        object.__setattr__(self, "update_target", UpdateTarget(self.update_target))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        if self.adapted_blocks is None:
            object.__setattr__(self, "adapted_blocks", self.depth)
        for name in ("image_size", "channels", "patch_size", "embed_dim", "depth", "heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not 0 <= self.adapted_blocks <= self.depth:
            raise ContractError(f"adapted_blocks must lie in [0, {self.depth}], got {self.adapted_blocks}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def is_adapted(self, block_index: int) -> bool:
        """Adapted blocks are counted from the end of the stack."""
        return block_index >= self.depth - self.adapted_blocks

    @property
    def adapted_indices(self) -> list[int]:
        return [i for i in range(self.depth) if self.is_adapted(i)]

    @property
    def delta_keys(self) -> tuple[str, ...]:
        return ATTENTION_KEYS if self.update_target is UpdateTarget.ATTENTION_QKV else MLP_KEYS

    @property
    def adapted_bias_fields(self) -> tuple[str, ...]:
        if self.update_target is UpdateTarget.ATTENTION_QKV:
            return ("b_q", "b_k", "b_v")
        return ("b_1", "b_2")

    def delta_shape(self, key: str) -> tuple[int, int]:
        d, m = self.embed_dim, self.mlp_hidden
        return {"q": (d, d), "k": (d, d), "v": (d, d), "w1": (d, m), "w2": (m, d)}[key]


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_shift: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            for f in fields(BlockParams):
                yield f"blocks.{i}.{f.name}", getattr(block, f.name)


BLOCK_FIELDS = tuple(f.name for f in fields(BlockParams))


def init_backbone(config: EncoderConfig, seed: int, dtype=np.float64, gain: float = 0.02) -> BackboneParams:
    """Seeded stand-in for pretrained weights: N(0, gain^2) matrices, zero biases, identity norms."""
    rng = np.random.default_rng(seed)
    d, m = config.embed_dim, config.mlp_hidden

    def gauss(*shape):
        return Tensor((rng.standard_normal(shape) * gain).astype(dtype))

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=dtype))

    patch_w = gauss(config.patch_dim, d)
    patch_b = const(0.0, d)
    cls_token = gauss(d)
    pos_embed = gauss(config.seq_len, d)
    blocks = []
    for _ in range(config.depth):
        blocks.append(
            BlockParams(
                ln1_gain=const(1.0, d), ln1_shift=const(0.0, d),
                w_q=gauss(d, d), b_q=const(0.0, d),
                w_k=gauss(d, d), b_k=const(0.0, d),
                w_v=gauss(d, d), b_v=const(0.0, d),
                w_o=gauss(d, d), b_o=const(0.0, d),
                ln2_gain=const(1.0, d), ln2_shift=const(0.0, d),
                w_1=gauss(d, m), b_1=const(0.0, m),
                w_2=gauss(m, d), b_2=const(0.0, d),
            )
        )
    return BackboneParams(patch_w, patch_b, cls_token, pos_embed, blocks)


@dataclass
class AdditiveUpdates:
    """Additive matrices keyed ``q``/``k``/``v`` (or ``w1``/``w2``).

    Shared updates hold one tensor per key; unshared ones hold one per key per
    adapted block under ``"<block>.<key>"``.
    """

    tensors: dict[str, Tensor]
    shared: bool = True

    @classmethod
    def zeros(cls, config: EncoderConfig, dtype=np.float64) -> "AdditiveUpdates":
        tensors = {}
        if config.share_updates:
            if config.adapted_blocks:
                for key in config.delta_keys:
                    tensors[key] = Tensor(np.zeros(config.delta_shape(key), dtype=dtype))
        else:
            for b in config.adapted_indices:
                for key in config.delta_keys:
                    tensors[f"{b}.{key}"] = Tensor(np.zeros(config.delta_shape(key), dtype=dtype))
        return cls(tensors, shared=config.share_updates)

    def get(self, block_index: int, key: str) -> Optional[Tensor]:
        return self.tensors.get(key if self.shared else f"{block_index}.{key}")

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self.tensors):
            yield f"delta.{name}", self.tensors[name]


@dataclass
class EncoderModel:
    config: EncoderConfig
    backbone: BackboneParams
    deltas: Optional[AdditiveUpdates] = field(default=None)

    @classmethod
    def build(cls, config: EncoderConfig, seed: int, dtype=np.float64) -> "EncoderModel":
        return cls(config, init_backbone(config, seed, dtype), AdditiveUpdates.zeros(config, dtype))

    @property
    def dtype(self):
        return self.backbone.patch_w.dtype

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every parameter in checkpoint order: backbone first, then deltas sorted by name."""
        out = list(self.backbone.named())
        if self.deltas is not None:
            out.extend(self.deltas.named())
        return out

    def adapted_bias_names(self) -> list[str]:
        return [f"blocks.{i}.{f}" for i in self.config.adapted_indices for f in self.config.adapted_bias_fields]

    def delta_parameters(self) -> list[Tensor]:
        return [] if self.deltas is None else [t for _, t in self.deltas.named()]

    def adapted_bias_parameters(self) -> list[Tensor]:
        return [getattr(self.backbone.blocks[i], f) for i in self.config.adapted_indices for f in self.config.adapted_bias_fields]

    def clone(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def digest(self, scope: str = "all") -> str:
        """SHA-256 over parameter names, shapes, dtypes and raw bytes.

        ``scope="all"`` covers everything; ``scope="frozen"`` skips the deltas and
        the adapted-block biases, i.e. exactly what base training may not touch.
        """
        if scope not in ("all", "frozen"):
            raise ValueError(f"unknown digest scope {scope!r}")
        skip = set(self.adapted_bias_names()) if scope == "frozen" else set()
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            if name in skip or (scope == "frozen" and name.startswith("delta.")):
                continue
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(str(t.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# forward pass


def patchify(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, P, C*p*p)``, patches in row-major order."""
    b, c, hgt, wid = images.shape
    if c != config.channels or hgt != config.image_size or wid != config.image_size:
        raise ShapeError(
            f"expected images of shape (B, {config.channels}, {config.image_size}, {config.image_size}), "
            f"got {images.shape}"
        )
    p = config.patch_size
    g = hgt // p
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def _batched(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ShapeError(f"expected a (C, H, W) image or a (B, C, H, W) batch, got shape {arr.shape}")
    return arr, False


def patchify_embed(images, backbone: BackboneParams, config: EncoderConfig) -> Tensor:
    """Patch projection, [CLS] prepended as row 0, positional encodings added.

    Returns ``(1+P, d)`` for a single image or ``(B, 1+P, d)`` for a batch.
    """
    arr, single = _batched(images)
    arr = arr.astype(backbone.patch_w.dtype, copy=False)
    tokens = ad.matmul(Tensor(patchify(arr, config)), backbone.patch_w) + backbone.patch_b
    cls = ad.broadcast_to(ad.reshape(backbone.cls_token, (1, 1, config.embed_dim)), (arr.shape[0], 1, config.embed_dim))
    seq = ad.concat([cls, tokens], axis=1) + backbone.pos_embed
    return seq[0] if single else seq


def _project(x: Tensor, weight: Tensor, delta: Optional[Tensor], bias: Tensor) -> Tensor:
    if delta is not None:
        weight = weight + delta
    return ad.matmul(x, weight) + bias


def _delta(config: EncoderConfig, deltas: Optional[AdditiveUpdates], block_index: int, key: str,
           target: UpdateTarget) -> Optional[Tensor]:
    if deltas is None or config.update_target is not target or not config.is_adapted(block_index):
        return None
    return deltas.get(block_index, key)


def attention_qkv(h: Tensor, block_index: int, backbone: BackboneParams,
                  deltas: Optional[AdditiveUpdates], config: EncoderConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Q, K, V projections of ``h``, with the additive updates applied on adapted blocks."""
    if not 0 <= block_index < config.depth:
        raise ContractError(f"block_index {block_index} out of range for depth {config.depth}")
    if h.shape[-1] != config.embed_dim:
        raise ShapeError(f"token width {h.shape[-1]} != embed_dim {config.embed_dim}")
    blk = backbone.blocks[block_index]
    target = UpdateTarget.ATTENTION_QKV
    q = _project(h, blk.w_q, _delta(config, deltas, block_index, "q", target), blk.b_q)
    k = _project(h, blk.w_k, _delta(config, deltas, block_index, "k", target), blk.b_k)
    v = _project(h, blk.w_v, _delta(config, deltas, block_index, "v", target), blk.b_v)
    return q, k, v


def _split_heads(x: Tensor, config: EncoderConfig) -> Tensor:
    b, t, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, t, config.heads, config.head_dim)), (0, 2, 1, 3))


def _self_attention(x: Tensor, block_index: int, model: EncoderModel) -> Tensor:
    config = model.config
    blk = model.backbone.blocks[block_index]
    q, k, v = attention_qkv(x, block_index, model.backbone, model.deltas, config)
    b, t, d = x.shape
    q, k, v = _split_heads(q, config), _split_heads(k, config), _split_heads(v, config)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(config.head_dim))
    mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(merged, blk.w_o) + blk.b_o


def _mlp(x: Tensor, block_index: int, model: EncoderModel) -> Tensor:
    config = model.config
    blk = model.backbone.blocks[block_index]
    target = UpdateTarget.MLP
    hidden = ad.gelu(_project(x, blk.w_1, _delta(config, model.deltas, block_index, "w1", target), blk.b_1))
    return _project(hidden, blk.w_2, _delta(config, model.deltas, block_index, "w2", target), blk.b_2)


def block_forward(h: Tensor, block_index: int, model: EncoderModel, eps: float = 1e-6) -> Tensor:
    """Pre-norm transformer block on a ``(B, T, d)`` sequence."""
    blk = model.backbone.blocks[block_index]
    h = h + _self_attention(ad.layer_norm(h, blk.ln1_gain, blk.ln1_shift, eps), block_index, model)
    return h + _mlp(ad.layer_norm(h, blk.ln2_gain, blk.ln2_shift, eps), block_index, model)


def forward_tokens(images, model: EncoderModel) -> Tensor:
    arr, _ = _batched(images)
    h = patchify_embed(arr, model.backbone, model.config)
    for i in range(model.config.depth):
        h = block_forward(h, i, model)
    return h


def forward(images, model: EncoderModel) -> Tensor:
    """L2-normalised final [CLS] embedding: ``(d,)`` per image or ``(B, d)`` per batch."""
    arr, single = _batched(images)
    cls = forward_tokens(arr, model)[:, 0, :]
    z = ad.l2_normalize(cls, axis=-1, eps=1e-12)
    return z[0] if single else z


def extract_features(images: np.ndarray, model: EncoderModel, chunk: int = 256) -> np.ndarray:
    """Untracked batched :func:`forward`; returns a plain ``(N, d)`` array."""
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros((0, model.config.embed_dim), dtype=model.dtype)
    parts = [forward(images[i:i + chunk], model).data for i in range(0, len(images), chunk)]
    return np.concatenate(parts, axis=0)


def trainable_parameter_count(config: EncoderConfig, num_classes: int = 0) -> dict[str, int]:
    """Trainable-parameter breakdown for base-session training."""
    n = config.adapted_blocks
    per_set = sum(int(np.prod(config.delta_shape(k))) for k in config.delta_keys)
    if n == 0:
        delta_params = 0
    elif config.share_updates:
        delta_params = per_set
    else:
        delta_params = n * per_set
    d, m = config.embed_dim, config.mlp_hidden
    per_block_bias = 3 * d if config.update_target is UpdateTarget.ATTENTION_QKV else m + d
    return {
        "delta_params": delta_params,
        "bias_params": n * per_block_bias,
        "classifier_params": num_classes * d,
    }
