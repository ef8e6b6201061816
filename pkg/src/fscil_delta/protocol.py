"""Session schedule, cumulative evaluation and headline metrics."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classifier import ClassifierState, cosine_logits, predict
from .encoder import EncoderModel, extract_features
from .errors import CapacityError, ContractError, DomainError

TRAIN, TEST = "train", "test"


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: np.ndarray
    label: int
    split: str = TRAIN

    def __post_init__(self):
        if self.label < 0:
            raise ContractError(f"labels must be non-negative, got {self.label}")
        if self.split not in (TRAIN, TEST):
            raise ContractError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass(frozen=True)
class Session:
    index: int
    class_ids: tuple[int, ...]
    train: tuple[LabeledSample, ...]
    test: tuple[LabeledSample, ...]


@dataclass(frozen=True)
class SessionPlan:
    sessions: tuple[Session, ...]
    ways: int
    shots: int
    seed: int

    @property
    def num_incremental(self) -> int:
        return len(self.sessions) - 1

    @property
    def all_class_ids(self) -> list[int]:
        return [c for s in self.sessions for c in s.class_ids]

    def to_json(self) -> dict:
        return {
            "ways": self.ways,
            "shots": self.shots,
            "seed": self.seed,
            "sessions": [
                {
                    "index": s.index,
                    "class_ids": list(s.class_ids),
                    "train_samples": len(s.train),
                    "test_samples": len(s.test),
                }
                for s in self.sessions
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


@dataclass(frozen=True)
class SessionReport:
    per_session_accuracy: tuple[float, ...]
    s_base: float
    s_last: float
    s_avg: float
    pd: float


def build_session_plan(dataset: Sequence[LabeledSample], base_class_count: int, ways: int, shots: int,
                       sessions: int, seed: int) -> SessionPlan:
    """Split classes into a base session and ``sessions`` N-way K-shot sessions.

    Classes are sorted by id and shuffled with ``seed``; incremental classes keep
    their first ``shots`` training samples after a seeded per-class shuffle.
    Classes not drawn into any session are dropped.
    """
    if base_class_count < 1 or ways < 1 or shots < 1 or sessions < 0:
        raise ContractError("base_class_count, ways and shots must be >= 1 and sessions >= 0")
    train_by_class: dict[int, list[LabeledSample]] = {}
    test_by_class: dict[int, list[LabeledSample]] = {}
    for s in dataset:
        train_by_class.setdefault(s.label, [])
        test_by_class.setdefault(s.label, [])
        (train_by_class if s.split == TRAIN else test_by_class)[s.label].append(s)

    classes = sorted(train_by_class)
    needed = base_class_count + ways * sessions
    if len(classes) < needed:
        raise CapacityError(f"plan needs {needed} classes but the dataset has {len(classes)} (short by {needed - len(classes)})")

    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))]
    base_ids = tuple(sorted(order[:base_class_count]))
    for c in base_ids:
        if not train_by_class[c]:
            raise CapacityError(f"base class {c} has no training samples")
    plan = [Session(0, base_ids,
                    tuple(s for c in base_ids for s in train_by_class[c]),
                    tuple(s for c in base_ids for s in test_by_class[c]))]

    for t in range(1, sessions + 1):
        start = base_class_count + (t - 1) * ways
        ids = tuple(sorted(order[start:start + ways]))
        train = []
        for c in ids:
            pool = train_by_class[c]
            if len(pool) < shots:
                raise CapacityError(f"class {c} has {len(pool)} training samples, {shots} shots needed (short by {shots - len(pool)})")
            picked = rng.permutation(len(pool))[:shots]
            train.extend(pool[i] for i in picked)
        plan.append(Session(t, ids, tuple(train), tuple(s for c in ids for s in test_by_class[c])))
    return SessionPlan(tuple(plan), ways, shots, seed)


def cumulative_test_set(plan: SessionPlan, t: int) -> list[LabeledSample]:
    """Test samples of every class introduced in sessions ``0..t``."""
    if not 0 <= t <= plan.num_incremental:
        raise ContractError(f"session {t} outside 0..{plan.num_incremental}")
    return [s for session in plan.sessions[: t + 1] for s in session.test]


def _count_correct(images: np.ndarray, labels: np.ndarray, encoder: EncoderModel, state: ClassifierState) -> int:
    feats = extract_features(images, encoder)
    pred = predict(cosine_logits(feats, state), state.class_ids)
    return int(np.sum(pred == labels))


def evaluate(encoder: EncoderModel, state: ClassifierState, testset: Sequence[LabeledSample],
             workers: int = 1, chunk: int = 256) -> float:
    """Fraction of samples whose top cosine logit is their label (ties -> lowest class id)."""
    if not testset:
        raise DomainError("cannot evaluate on an empty test set")
    known = set(state.class_ids)
    unseen = sorted({s.label for s in testset} - known)
    if unseen:
        raise ContractError(f"test labels {unseen} are not in the classifier")
    images = np.stack([s.image for s in testset])
    labels = np.array([s.label for s in testset])
    spans = [(i, min(i + chunk, len(testset))) for i in range(0, len(testset), chunk)]
    if workers <= 1:
        correct = sum(_count_correct(images[a:b], labels[a:b], encoder, state) for a, b in spans)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            correct = sum(pool.map(lambda ab: _count_correct(images[ab[0]:ab[1]], labels[ab[0]:ab[1]], encoder, state), spans))
    return correct / len(testset)


def summarize(per_session_accuracy: Sequence[float]) -> SessionReport:
    acc = tuple(float(a) for a in per_session_accuracy)
    if not acc:
        raise DomainError("need at least one session accuracy")
    return SessionReport(
        per_session_accuracy=acc,
        s_base=acc[0],
        s_last=acc[-1],
        s_avg=sum(acc) / len(acc),
        pd=acc[0] - acc[-1],
    )
