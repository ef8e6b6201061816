"""Few-shot class-incremental learning on a frozen miniature ViT adapted by shared additive updates."""

from .autodiff import Tape, Tensor, backward
from .classifier import ClassifierState, append_classes, cosine_logits, fit_prototype, replace_base_classifier
from .encoder import AdditiveUpdates, EncoderConfig, EncoderModel, UpdateTarget, forward, trainable_parameter_count
from .protocol import LabeledSample, SessionPlan, SessionReport, build_session_plan, cumulative_test_set, evaluate, summarize
from .trainer import TrainConfig, run_experiment, run_full_experiment, train_base_session

__all__ = [
    "AdditiveUpdates", "ClassifierState", "EncoderConfig", "EncoderModel", "LabeledSample", "SessionPlan",
    "SessionReport", "Tape", "Tensor", "TrainConfig", "UpdateTarget", "append_classes", "backward",
    "build_session_plan", "cosine_logits", "cumulative_test_set", "evaluate", "fit_prototype", "forward",
    "replace_base_classifier", "run_experiment", "run_full_experiment", "summarize", "train_base_session",
    "trainable_parameter_count",
]
