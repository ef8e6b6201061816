"""Base-session optimisation, freeze schedule and incremental sessions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .classifier import (
    DEFAULT_TEMPERATURE,
    ClassifierState,
    append_classes,
    cosine_logits_tensor,
    init_classifier,
    replace_base_classifier,
)
from .encoder import EncoderConfig, EncoderModel, extract_features, forward, trainable_parameter_count
from .errors import ContractError, InvariantError
from .protocol import LabeledSample, Session, SessionPlan, SessionReport, cumulative_test_set, evaluate, summarize

logger = logging.getLogger(__name__)

LogFn = Callable[[dict], None]


class Phase(str, Enum):
    BASE = "base"
    INCREMENTAL = "incremental"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    precision: str = "double"
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.precision not in ("double", "single"):
            raise ContractError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


@dataclass(frozen=True)
class FreezeSchedule:
    """Which encoder parameters may receive gradients in a phase."""

    phase: Phase

    def trainable_names(self, encoder: EncoderModel) -> set[str]:
        if self.phase is Phase.INCREMENTAL:
            return set()
        names = set(encoder.adapted_bias_names())
        if encoder.deltas is not None:
            names.update(name for name, _ in encoder.deltas.named())
        return names

    def apply(self, encoder: EncoderModel) -> list[Tensor]:
        """Set ``requires_grad`` on every encoder parameter; return the trainable ones in order."""
        names = self.trainable_names(encoder)
        out = []
        for name, t in encoder.named_parameters():
            t.requires_grad = name in names
            t.grad = None
            if t.requires_grad:
                out.append(t)
        return out


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, momentum: float,
             velocity: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``. Inputs are not modified."""
    if not len(params) == len(grads) == len(velocity):
        raise ContractError("params, grads and velocity must have the same length")
    new_p, new_v = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if not np.shape(p) == np.shape(g) == np.shape(v):
            raise ContractError(f"entry {i}: shapes {np.shape(p)}, {np.shape(g)}, {np.shape(v)} disagree")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def _streams(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: int(c.generate_state(1)[0]) for name, c in zip(("backbone", "classifier", "shuffle"), children)}


def train_base_session(encoder: EncoderModel, state: ClassifierState, base_data: Sequence[LabeledSample],
                       cfg: TrainConfig, log: Optional[LogFn] = None
                       ) -> tuple[EncoderModel, ClassifierState, list[float]]:
    """Mini-batch SGD on cross-entropy over cosine logits.

    Trains the additive updates, the adapted-block biases and the classifier
    rows; everything else stays fixed.  The inputs are not modified: a trained
    copy of the encoder (already switched to the incremental phase, i.e. fully
    frozen) and a new classifier state are returned with the per-step losses.
    """
    index = {c: i for i, c in enumerate(state.class_ids)}
    outside = sorted({s.label for s in base_data} - set(index))
    if outside:
        raise ContractError(f"labels {outside} are not base classes of the classifier")

    enc = encoder.clone()
    weights = Tensor(np.array(state.weights, dtype=enc.dtype), requires_grad=True, name="classifier")
    params = FreezeSchedule(Phase.BASE).apply(enc) + [weights]
    velocity = [np.zeros_like(p.data) for p in params]
    curve: list[float] = []
    if cfg.epochs and base_data:
        images = np.stack([s.image for s in base_data]).astype(enc.dtype, copy=False)
        targets = np.array([index[s.label] for s in base_data])
        rng = np.random.default_rng(_streams(cfg.seed)["shuffle"])
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(base_data))
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                with Tape() as tape:
                    z = forward(images[batch], enc)
                    loss = ad.cross_entropy(cosine_logits_tensor(z, weights, state.temperature), targets[batch])
                ad.backward(loss, tape)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                new_p, velocity = sgd_step([p.data for p in params], grads, cfg.learning_rate, cfg.momentum, velocity)
                for p, value in zip(params, new_p):
                    p.data = value
                    p.grad = None
                value = float(loss.data)
                curve.append(value)
                if log is not None:
                    log({"session": 0, "epoch": epoch, "step": step, "loss": value})
                step += 1
    FreezeSchedule(Phase.INCREMENTAL).apply(enc)
    return enc, ClassifierState(weights.data, state.class_ids, state.temperature), curve


def _group_features(samples: Sequence[LabeledSample], encoder: EncoderModel) -> dict[int, np.ndarray]:
    if not samples:
        return {}
    feats = extract_features(np.stack([s.image for s in samples]), encoder)
    labels = np.array([s.label for s in samples])
    return {int(c): feats[labels == c] for c in np.unique(labels)}


def _require_frozen(encoder: EncoderModel) -> None:
    live = [name for name, t in encoder.named_parameters() if t.requires_grad]
    if live:
        raise ContractError(f"encoder is not frozen; trainable parameters: {live[:5]}")


def run_incremental_session(encoder: EncoderModel, state: ClassifierState, session) -> ClassifierState:
    """Append one prototype per new class, computed with the frozen encoder."""
    _require_frozen(encoder)
    samples = session.train if isinstance(session, Session) else session
    overlap = sorted({s.label for s in samples} & set(state.class_ids))
    if overlap:
        raise ContractError(f"session classes {overlap} already exist in the classifier")
    before = encoder.digest()
    out = append_classes(state, _group_features(samples, encoder))
    if encoder.digest() != before:
        raise InvariantError("encoder parameters changed during an incremental session")
    return out


@dataclass
class ExperimentResult:
    report: SessionReport
    encoder: EncoderModel
    classifier: ClassifierState
    loss_curve: list[float]
    base_train_accuracy: float
    parameter_counts: dict[str, int]
    timings: dict[str, float] = field(default_factory=dict)


def run_experiment(plan: SessionPlan, encoder_cfg: EncoderConfig, train_cfg: TrainConfig,
                   log: Optional[LogFn] = None, workers: int = 1) -> ExperimentResult:
    """Base training, prototype replacement, then one append + evaluation per session."""
    timings: dict[str, float] = {}
    seeds = _streams(train_cfg.seed)
    base = plan.sessions[0]
    encoder = EncoderModel.build(encoder_cfg, seeds["backbone"], dtype=train_cfg.dtype)
    FreezeSchedule(Phase.BASE).apply(encoder)
    state = init_classifier(base.class_ids, encoder_cfg.embed_dim, seeds["classifier"],
                            temperature=train_cfg.temperature, dtype=train_cfg.dtype)

    tic = time.perf_counter()
    frozen_before = encoder.digest("frozen")
    encoder, trained, curve = train_base_session(encoder, state, base.train, train_cfg, log=log)
    if encoder.digest("frozen") != frozen_before:
        raise InvariantError("backbone parameters changed during base training")
    timings["base_training_s"] = time.perf_counter() - tic

    tic = time.perf_counter()
    base_train_acc = evaluate(encoder, trained, base.train, workers=workers)
    state = replace_base_classifier(trained, _group_features(base.train, encoder))
    frozen_digest = encoder.digest()
    accuracies = [evaluate(encoder, state, cumulative_test_set(plan, 0), workers=workers)]
    for t in range(1, len(plan.sessions)):
        state = run_incremental_session(encoder, state, plan.sessions[t])
        accuracies.append(evaluate(encoder, state, cumulative_test_set(plan, t), workers=workers))
        logger.info("session %d: %d classes, accuracy %.4f", t, state.num_classes, accuracies[-1])
    if encoder.digest() != frozen_digest:
        raise InvariantError("encoder parameters changed after base training")
    timings["incremental_s"] = time.perf_counter() - tic

    return ExperimentResult(
        report=summarize(accuracies),
        encoder=encoder,
        classifier=state,
        loss_curve=curve,
        base_train_accuracy=base_train_acc,
        parameter_counts=trainable_parameter_count(encoder_cfg, num_classes=len(base.class_ids)),
        timings=timings,
    )


def run_full_experiment(plan: SessionPlan, encoder_cfg: EncoderConfig, train_cfg: TrainConfig) -> SessionReport:
    return run_experiment(plan, encoder_cfg, train_cfg).report
