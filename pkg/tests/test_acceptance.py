"""Acceptance gate. Each test appends one PASS/FAIL line, printed at the end of the run."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from fscil_delta import autodiff as ad
from fscil_delta.autodiff import Tape, Tensor, backward
from fscil_delta.classifier import cosine_logits_tensor, fit_prototype, init_classifier, replace_base_classifier
from fscil_delta.config import load_config
from fscil_delta.data import SyntheticParams, generate_synthetic_dataset
from fscil_delta.encoder import EncoderConfig, EncoderModel, UpdateTarget, forward, trainable_parameter_count
from fscil_delta.experiment import execute, strip_timing
from fscil_delta.protocol import build_session_plan, summarize
from fscil_delta.trainer import (
    FreezeSchedule,
    Phase,
    TrainConfig,
    _group_features,
    _streams,
    run_incremental_session,
    train_base_session,
)

from conftest import ACCEPTANCE_LINES, randomize_backbone, randomize_deltas
from test_classifier import descent_minimizer
from test_encoder import reference_of, shared_vs_unshared_grads
from test_protocol import CUB_ROW, check_plan, fake_dataset

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


def central_diff(loss_fn, tensor, h=1e-5):
    out = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def test_01_zero_delta_equivalence():
    configs = [
        EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2),
        EncoderConfig(image_size=8, patch_size=2, embed_dim=16, depth=3, heads=4, adapted_blocks=1, share_updates=False),
        EncoderConfig(update_target=UpdateTarget.MLP, adapted_blocks=3),
    ]
    tic = time.perf_counter()
    mismatches = 0
    for k, cfg in enumerate(configs):
        rng = np.random.default_rng(100 + k)
        model = randomize_backbone(EncoderModel.build(cfg, k), rng)
        ref = reference_of(model)
        for i in range(100):
            img = rng.standard_normal((cfg.channels, cfg.image_size, cfg.image_size))
            a, b = forward(img, model).data, forward(img, ref).data
            mismatches += a.tobytes() != b.tobytes()
    elapsed = time.perf_counter() - tic
    record(1, "zero-delta equivalence", mismatches == 0 and elapsed < 10,
           f"{mismatches} mismatches over 300 inputs, {elapsed:.2f}s (< 10s)")


def test_02_gradient_check():
    tic = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2)
    model = randomize_deltas(randomize_backbone(EncoderModel.build(cfg, 2), rng), rng)
    FreezeSchedule(Phase.BASE).apply(model)
    weights = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    imgs = rng.standard_normal((4, 3, 8, 8))
    labels = rng.integers(0, 5, 4)

    def loss():
        return ad.cross_entropy(cosine_logits_tensor(forward(imgs, model), weights, 16.0), labels)

    with Tape() as tape:
        value = loss()
    backward(value, tape)
    checked = dict(model.deltas.named())
    checked.update(zip(model.adapted_bias_names(), model.adapted_bias_parameters()))
    checked["classifier"] = weights
    worst, worst_name = 0.0, ""
    for name, t in checked.items():
        numeric = central_diff(lambda: float(loss().data), t)
        scale = np.maximum(np.abs(numeric), np.abs(t.grad))
        mask = scale > 1e-7
        err = float(np.max(np.abs(t.grad - numeric)[mask] / scale[mask])) if mask.any() else 0.0
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - tic
    record(2, "gradient correctness", worst < 1e-4 and elapsed < 60,
           f"{len(checked)} tensors, max relative error {worst:.2e} at {worst_name} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_03_shared_gradient_aggregation():
    worst = max(shared_vs_unshared_grads(seed) for seed in range(10))
    record(3, "shared-gradient aggregation", worst <= 1e-10, f"max |difference| {worst:.2e} over 10 models (<= 1e-10)")


def test_04_prototype_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(1, 30)), int(rng.integers(2, 64))
        feats = rng.standard_normal((n, d))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        feats += rng.standard_normal(d)  # keep the mean well away from zero
        proto = fit_prototype(feats)
        mu = descent_minimizer(feats)
        worst = max(worst, 1.0 - float(proto @ (mu / np.linalg.norm(mu))))
    record(4, "prototype oracle", worst <= 1e-6, f"max cosine distance {worst:.2e} over 50 sets (<= 1e-6)")


def test_05_freeze_conservation():
    sessions = 8
    ds = generate_synthetic_dataset(SyntheticParams(classes=10 + 2 * sessions, samples_per_class=8, image_size=8, seed=5))
    plan = build_session_plan(ds, 10, 2, 3, sessions, seed=5)
    cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2)
    train = TrainConfig(epochs=2, batch_size=16, seed=5)
    seeds = _streams(5)
    model = EncoderModel.build(cfg, seeds["backbone"])
    state = init_classifier(plan.sessions[0].class_ids, 8, seeds["classifier"])
    frozen_before = model.digest("frozen")
    model, trained, _ = train_base_session(model, state, plan.sessions[0].train, train)
    backbone_ok = model.digest("frozen") == frozen_before
    trained_changed = model.digest() != EncoderModel.build(cfg, seeds["backbone"]).digest()
    state = replace_base_classifier(trained, _group_features(plan.sessions[0].train, model))
    digest = model.digest()
    changed = 0
    for t in range(1, sessions + 1):
        state = run_incremental_session(model, state, plan.sessions[t])
        changed += model.digest() != digest
    ok = backbone_ok and trained_changed and changed == 0 and state.num_classes == 10 + 2 * sessions
    record(5, "freeze conservation", ok,
           f"backbone digest kept across base training: {backbone_ok}; "
           f"encoder digest changed in {changed}/{sessions} incremental sessions")


@pytest.mark.parametrize("name, base, ways, shots, sessions", [
    ("CUB-style", 100, 10, 5, 10),
    ("CIFAR-style", 60, 5, 5, 8),
])
def test_06_protocol_exactness(name, base, ways, shots, sessions):
    rng = np.random.default_rng(6)
    ds = fake_dataset(base + ways * sessions, 7, 3, rng)
    plan = build_session_plan(ds, base, ways, shots, sessions, seed=6)
    try:
        check_plan(plan, ds, base, ways, shots, sessions)
        ok, detail = True, f"{sessions + 1} sessions, all counts match the filter oracle"
    except AssertionError as exc:
        ok, detail = False, f"mismatch: {exc}"
    record(6, f"protocol exactness ({name})", ok, detail)


def test_07_metric_identities():
    report = summarize([a / 100 for a in CUB_ROW])
    pd, s_avg = 100 * report.pd, 100 * report.s_avg
    ok = abs(pd - 4.15) < 0.005 and abs(s_avg - 84.97) < 0.005
    record(7, "metric identities", ok, f"PD {pd:.4f} (4.15), S_avg {s_avg:.4f} (84.97), tolerance 0.005")


def test_08_parameter_accounting():
    got = {}
    for d in (8, 16, 32):
        for target, factor in ((UpdateTarget.ATTENTION_QKV, 3), (UpdateTarget.MLP, 8)):
            cfg = EncoderConfig(image_size=4, patch_size=4, embed_dim=d, depth=2, heads=2, update_target=target)
            got[(d, target.value)] = (trainable_parameter_count(cfg)["delta_params"], factor * d * d)
    bad = {k: v for k, v in got.items() if v[0] != v[1]}
    record(8, "parameter accounting", not bad,
           "3d^2 / 8d^2 exact for d in {8, 16, 32}" if not bad else f"mismatches {bad}")


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    cfg = load_config(DESK)
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for key, blocks in (("full", cfg.encoder.depth), ("repeat", cfg.encoder.depth), ("zero", 0)):
        variant = cfg.model_copy(update={"encoder": cfg.encoder.model_copy(update={"adapted_blocks": blocks})})
        tic = time.perf_counter()
        doc = execute(variant, root / key)
        runs[key] = (doc, root / key / "results.json", time.perf_counter() - tic)
    return runs


@pytest.mark.slow
def test_09_desk_learning(desk_runs):
    doc, _, elapsed = desk_runs["full"]
    ok = doc["s_avg"] >= 0.90 and doc["pd"] <= 0.10 and doc["base_train_accuracy"] >= 0.95 and elapsed < 300
    record(9, "desk-scale learning", ok,
           f"s_avg {doc['s_avg']:.4f} (>= 0.90), pd {doc['pd']:.4f} (<= 0.10), "
           f"base train acc {doc['base_train_accuracy']:.4f} (>= 0.95), {elapsed:.0f}s (< 300s)")


@pytest.mark.slow
def test_10_ablation_direction(desk_runs):
    full, zero = desk_runs["full"][0]["s_avg"], desk_runs["zero"][0]["s_avg"]
    record(10, "ablation direction", full >= zero, f"s_avg all blocks {full:.4f} >= no blocks {zero:.4f}")


@pytest.mark.slow
def test_11_determinism(desk_runs):
    a = json.loads(desk_runs["full"][1].read_text())
    b = json.loads(desk_runs["repeat"][1].read_text())
    ca = json.dumps(strip_timing(a), indent=2).encode()
    cb = json.dumps(strip_timing(b), indent=2).encode()
    record(11, "determinism", ca == cb, f"results.json without timing: {len(ca)} bytes, identical={ca == cb}")
