"""Run configured experiments and ablation sweeps, writing result files."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import save_classifier, save_encoder
from .config import ConfigError, ExperimentConfig, parse_config
from .data import SyntheticParams, generate_synthetic_dataset, load_dataset
from .encoder import UpdateTarget
from .protocol import LabeledSample, SessionPlan, build_session_plan
from .trainer import ExperimentResult, run_experiment

logger = logging.getLogger(__name__)

SWEEP_AXES = ("adapted_blocks", "update_target")


def synthetic_params(cfg: ExperimentConfig) -> SyntheticParams:
    return SyntheticParams(
        classes=cfg.data.classes,
        samples_per_class=cfg.data.samples_per_class,
        separation=cfg.data.separation,
        noise_std=cfg.data.noise_std,
        channels=cfg.encoder.channels,
        image_size=cfg.encoder.image_size,
        train_fraction=cfg.data.train_fraction,
        seed=cfg.seed,
    )


def materialize_dataset(cfg: ExperimentConfig) -> list[LabeledSample]:
    if cfg.data.source == "synthetic":
        return generate_synthetic_dataset(synthetic_params(cfg))
    return load_dataset(cfg.data.path)


def make_plan(cfg: ExperimentConfig, dataset: Sequence[LabeledSample]) -> SessionPlan:
    p = cfg.protocol
    return build_session_plan(dataset, p.base_classes, p.ways, p.shots, p.sessions, seed=cfg.seed)


def results_document(cfg: ExperimentConfig, plan: SessionPlan, result: ExperimentResult,
                     timing: dict[str, float]) -> dict:
    report = result.report
    sessions = []
    seen = 0
    for t, acc in enumerate(report.per_session_accuracy):
        seen += len(plan.sessions[t].class_ids)
        sessions.append({
            "session": t,
            "classes_seen": seen,
            "test_samples": sum(len(s.test) for s in plan.sessions[: t + 1]),
            "accuracy": acc,
        })
    return {
        "config": cfg.echo(),
        "sessions": sessions,
        "s_base": report.s_base,
        "s_last": report.s_last,
        "s_avg": report.s_avg,
        "pd": report.pd,
        "base_train_accuracy": result.base_train_accuracy,
        "final_train_loss": result.loss_curve[-1] if result.loss_curve else None,
        "trainable_parameters": result.parameter_counts,
        "timing": timing,
    }


def strip_timing(document: dict) -> dict:
    return {k: v for k, v in document.items() if k != "timing"}


def _write_sessions_csv(path: Path, document: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session", "classes_seen", "test_samples", "accuracy_pct"])
        for row in document["sessions"]:
            writer.writerow([row["session"], row["classes_seen"], row["test_samples"], f"{100 * row['accuracy']:.2f}"])


def execute(cfg: ExperimentConfig, out_dir: str | Path, dataset: Optional[Sequence[LabeledSample]] = None,
            plan: Optional[SessionPlan] = None) -> dict:
    """Run one experiment and write ``results.json``, ``sessions.csv``, ``train_log.jsonl``,
    ``plan.json``, ``encoder.ckpt`` and ``classifier.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tic = time.perf_counter()
    if dataset is None:
        dataset = materialize_dataset(cfg)
    if plan is None:
        plan = make_plan(cfg, dataset)
    timing = {"data_s": time.perf_counter() - tic}
    (out / "plan.json").write_text(plan.dumps() + "\n")

    with open(out / "train_log.jsonl", "w") as log_fh:
        def log(record: dict) -> None:
            log_fh.write(json.dumps(record) + "\n")

        result = run_experiment(plan, cfg.encoder_config(), cfg.train_config(), log=log)
    timing.update(result.timings)
    timing["total_s"] = time.perf_counter() - tic

    document = results_document(cfg, plan, result, timing)
    (out / "results.json").write_text(json.dumps(document, indent=2) + "\n")
    _write_sessions_csv(out / "sessions.csv", document)
    save_encoder(result.encoder, out / "encoder.ckpt")
    save_classifier(result.classifier, out / "classifier.bin")
    logger.info("wrote %s (s_avg %.4f, pd %.4f)", out, document["s_avg"], document["pd"])
    return document


def parse_sweep_values(axis: str, values: Sequence[str]) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("values: at least one sweep value is required")
    if axis == "adapted_blocks":
        try:
            return [int(v) for v in values]
        except ValueError:
            raise ConfigError(f"values: adapted_blocks values must be integers, got {list(values)}") from None
    try:
        return [UpdateTarget(v).value for v in values]
    except ValueError:
        raise ConfigError(f"values: update_target values must be in {[t.value for t in UpdateTarget]}") from None


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out_dir: str | Path) -> list[dict]:
    """One run per value of ``axis`` on a shared dataset and plan, plus ``comparison.csv``."""
    values = parse_sweep_values(axis, [str(v) for v in values])
    variants = []
    for value in values:
        raw = cfg.echo()
        raw["encoder"][axis] = value
        variants.append(parse_config(raw))
    dataset = materialize_dataset(cfg)
    plan = make_plan(cfg, dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, variant in zip(values, variants):
        doc = execute(variant, out / f"{axis}={value}", dataset=dataset, plan=plan)
        rows.append({
            axis: value,
            "s_base": doc["s_base"],
            "s_last": doc["s_last"],
            "s_avg": doc["s_avg"],
            "pd": doc["pd"],
            "delta_params": doc["trainable_parameters"]["delta_params"],
        })
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "s_base_pct", "s_last_pct", "s_avg_pct", "pd_pct", "delta_params"])
        for r in rows:
            writer.writerow([r[axis], *(f"{100 * r[k]:.2f}" for k in ("s_base", "s_last", "s_avg", "pd")), r["delta_params"]])
    (out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
