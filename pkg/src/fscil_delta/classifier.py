"""Cosine classifier with temperature, prototype replacement and append."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
DEFAULT_TEMPERATURE = 16.0


@dataclass(frozen=True)
class ClassifierState:
    """Per-class weight rows (``C x d``) aligned with ``class_ids``.

    Rows are stored as given; they are normalised when logits are computed.
    """

    weights: np.ndarray
    class_ids: tuple[int, ...]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ShapeError(f"classifier weights must be 2-D, got shape {w.shape}")
        ids = tuple(int(c) for c in self.class_ids)
        if len(ids) != w.shape[0]:
            raise ContractError(f"{len(ids)} class ids for {w.shape[0]} weight rows")
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate class ids in {ids}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "class_ids", ids)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def index_of(self, class_id: int) -> int:
        return self.class_ids.index(int(class_id))


def init_classifier(class_ids: Sequence[int], dim: int, seed: int, std: float = 0.02,
                    temperature: float = DEFAULT_TEMPERATURE, dtype=np.float64) -> ClassifierState:
    rng = np.random.default_rng(seed)
    weights = (rng.standard_normal((len(class_ids), dim)) * std).astype(dtype)
    return ClassifierState(weights, tuple(class_ids), temperature)


def cosine_logits_tensor(z: Tensor, weights: Tensor, temperature: float) -> Tensor:
    """Differentiable ``tau * z @ normalize(weights).T`` for ``z`` of shape ``(B, d)``."""
    norms = np.linalg.norm(weights.data, axis=1)
    if np.any(norms <= NORM_EPS):
        logger.warning("classifier rows %s have zero norm; using eps-guarded normalisation",
                       np.flatnonzero(norms <= NORM_EPS).tolist())
    unit = ad.l2_normalize(weights, axis=1, eps=NORM_EPS)
    return ad.matmul(z, ad.transpose(unit, (1, 0))) * temperature


def cosine_logits(z, state: ClassifierState) -> np.ndarray:
    """Temperature-scaled cosine similarities of unit feature(s) ``z`` to every class row."""
    arr = np.asarray(z.data if isinstance(z, Tensor) else z)
    single = arr.ndim == 1
    batch = arr[None] if single else arr
    if batch.shape[-1] != state.dim:
        raise ShapeError(f"feature width {batch.shape[-1]} != classifier width {state.dim}")
    unit = _unit_rows(state.weights)
    # per-class reductions, so a class's logit never depends on which other rows exist
    out = state.temperature * np.sum(batch[:, None, :] * unit[None, :, :], axis=-1)
    return out[0] if single else out


def _unit_rows(weights: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(weights, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        logger.warning("classifier rows %s have zero norm; using eps-guarded normalisation",
                       np.flatnonzero(norms.ravel() <= NORM_EPS).tolist())
    return weights / np.maximum(norms, NORM_EPS)


def fit_prototype(features) -> np.ndarray:
    """Normalised mean of the class features (closed-form minimiser of the squared-distance sum)."""
    arr = np.asarray(features)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape[0] == 0:
        raise DomainError("cannot fit a prototype to an empty feature set")
    mean = arr.sum(axis=0) / arr.shape[0]
    norm = np.linalg.norm(mean)
    if norm <= NORM_EPS:
        logger.warning("class mean has zero norm; using eps-guarded normalisation")
    return mean / max(norm, NORM_EPS)


def replace_base_classifier(state: ClassifierState, per_class_features: Mapping[int, np.ndarray]) -> ClassifierState:
    """Swap every row for the prototype of its class; order and temperature are kept."""
    missing = [c for c in state.class_ids if c not in per_class_features]
    if missing:
        raise ContractError(f"no features supplied for classes {missing}")
    extra = sorted(set(per_class_features) - set(state.class_ids))
    if extra:
        raise ContractError(f"features supplied for classes not in the classifier: {extra}")
    rows = np.stack([fit_prototype(per_class_features[c]) for c in state.class_ids]).astype(state.weights.dtype)
    return ClassifierState(rows, state.class_ids, state.temperature)


def append_classes(state: ClassifierState, new_per_class_features: Mapping[int, np.ndarray]) -> ClassifierState:
    """Append one prototype row per new class, in ascending class-id order."""
    new_ids = sorted(int(c) for c in new_per_class_features)
    clash = sorted(set(new_ids) & set(state.class_ids))
    if clash:
        raise ContractError(f"classes already present in the classifier: {clash}")
    if not new_ids:
        return state
    rows = np.stack([fit_prototype(new_per_class_features[c]) for c in new_ids]).astype(state.weights.dtype)
    return ClassifierState(np.concatenate([state.weights, rows]), state.class_ids + tuple(new_ids), state.temperature)


def predict(logits: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Argmax class id per row; ties go to the lowest class id."""
    logits = np.atleast_2d(logits)
    ids = np.asarray(class_ids)
    best = logits.max(axis=1, keepdims=True)
    candidates = np.where(logits == best, ids[None, :], np.iinfo(np.int64).max)
    return candidates.min(axis=1)
