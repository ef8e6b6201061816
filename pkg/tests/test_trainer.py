import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from fscil_delta.classifier import ClassifierState, init_classifier
from fscil_delta.data import SyntheticParams, generate_synthetic_dataset
from fscil_delta.encoder import EncoderConfig, EncoderModel, extract_features
from fscil_delta.errors import ContractError
from fscil_delta.protocol import LabeledSample, build_session_plan, evaluate
from fscil_delta.trainer import (
    FreezeSchedule,
    Phase,
    TrainConfig,
    run_experiment,
    run_full_experiment,
    run_incremental_session,
    sgd_step,
    train_base_session,
)

SMALL = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2)


class TestSgdStep:
    def test_vanilla(self, rng):
        p, g = rng.standard_normal(4), rng.standard_normal(4)
        (new,), _ = sgd_step([p], [g], 0.3, 0.0, [np.zeros(4)])
        np.testing.assert_array_equal(new, p - 0.3 * g)

    def test_zero_gradient(self, rng):
        p = rng.standard_normal((2, 3))
        (new,), (v,) = sgd_step([p], [np.zeros((2, 3))], 0.1, 0.9, [np.zeros((2, 3))])
        np.testing.assert_array_equal(new, p)
        np.testing.assert_array_equal(v, 0)

    def test_two_momentum_steps(self):
        # hand recurrence: v1 = 1, p1 = -0.1; v2 = 0.9 * 1 + 1 = 1.9, p2 = -0.1 - 0.19
        p, v = 0.0, 0.0
        for _ in range(2):
            v = 0.9 * v + 1.0
            p = p - 0.1 * v
        assert abs(p - (-0.29)) < 1e-15
        params, vel = [np.array(0.0)], [np.array(0.0)]
        for _ in range(2):
            params, vel = sgd_step(params, [np.array(1.0)], 0.1, 0.9, vel)
        assert abs(float(params[0]) - p) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            sgd_step([np.zeros(3)], [np.zeros(2)], 0.1, 0.9, [np.zeros(3)])

    def test_inputs_untouched_and_deterministic(self, rng):
        p, g, v = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5)
        keep = p.copy(), v.copy()
        a = sgd_step([p], [g], 0.05, 0.9, [v])
        b = sgd_step([p], [g], 0.05, 0.9, [v])
        assert a[0][0].tobytes() == b[0][0].tobytes() and a[1][0].tobytes() == b[1][0].tobytes()
        np.testing.assert_array_equal(p, keep[0])
        np.testing.assert_array_equal(v, keep[1])


class TestFreezeSchedule:
    @pytest.mark.parametrize("target, biases", [("attention_qkv", ("b_q", "b_k", "b_v")), ("mlp", ("b_1", "b_2"))])
    def test_base_phase(self, target, biases):
        cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=3, heads=2, adapted_blocks=2, update_target=target)
        model = EncoderModel.build(cfg, 0)
        trainable = FreezeSchedule(Phase.BASE).trainable_names(model)
        expected = {f"blocks.{b}.{f}" for b in (1, 2) for f in biases} | {n for n, _ in model.deltas.named()}
        assert trainable == expected
        FreezeSchedule(Phase.BASE).apply(model)
        assert not any(t.requires_grad for n, t in model.named_parameters() if n not in expected)
        assert not model.backbone.blocks[0].b_q.requires_grad

    def test_incremental_phase(self):
        model = EncoderModel.build(SMALL, 0)
        FreezeSchedule(Phase.BASE).apply(model)
        assert FreezeSchedule(Phase.INCREMENTAL).apply(model) == []
        assert not any(t.requires_grad for _, t in model.named_parameters())


def _two_class(seed=0, per_class=20):
    ds = generate_synthetic_dataset(SyntheticParams(classes=2, samples_per_class=per_class, noise_std=0.3,
                                                    image_size=16, seed=seed))
    return [s for s in ds if s.split == "train"]


class TestTrainBaseSession:
    def _setup(self, cfg=SMALL, classes=(0, 1)):
        model = EncoderModel.build(cfg, 1)
        state = init_classifier(classes, cfg.embed_dim, seed=2)
        rng = np.random.default_rng(0)
        data = [LabeledSample(rng.standard_normal((3, cfg.image_size, cfg.image_size)), c) for c in classes for _ in range(4)]
        return model, state, data

    def test_zero_epochs(self):
        model, state, data = self._setup()
        enc, out, curve = train_base_session(model, state, data, TrainConfig(epochs=0))
        assert curve == []
        assert enc.digest() == model.digest()
        assert out.weights.tobytes() == state.weights.tobytes()

    def test_zero_learning_rate(self):
        model, state, data = self._setup()
        enc, out, curve = train_base_session(model, state, data, TrainConfig(epochs=3, learning_rate=0.0, batch_size=64))
        assert len(curve) == 3
        np.testing.assert_allclose(curve, curve[0], rtol=0, atol=1e-12)
        assert enc.digest() == model.digest()
        assert out.weights.tobytes() == state.weights.tobytes()

    def test_steps_and_freezing(self):
        model, state, data = self._setup()
        before_all, before_frozen = model.digest(), model.digest("frozen")
        enc, out, curve = train_base_session(model, state, data, TrainConfig(epochs=2, batch_size=3))
        assert len(curve) == 2 * 3  # ceil(8 / 3) steps per epoch, last partial batch kept
        assert model.digest() == before_all  # input untouched
        assert enc.digest("frozen") == before_frozen
        assert enc.digest() != before_all
        assert all(np.abs(t.data).max() > 0 for t in enc.delta_parameters())
        assert not any(t.requires_grad for _, t in enc.named_parameters())

    def test_log_records(self):
        model, state, data = self._setup()
        records = []
        train_base_session(model, state, data, TrainConfig(epochs=2, batch_size=4), log=records.append)
        assert [r["step"] for r in records] == [0, 1, 2, 3]
        assert [r["epoch"] for r in records] == [0, 0, 1, 1]
        assert all(r["session"] == 0 and np.isfinite(r["loss"]) for r in records)

    def test_foreign_label(self):
        model, state, data = self._setup()
        data.append(LabeledSample(data[0].image, 9))
        with pytest.raises(ContractError):
            train_base_session(model, state, data, TrainConfig(epochs=1))

    def test_separable_two_class(self):
        cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=32, depth=2, heads=4)
        data = _two_class()
        model = EncoderModel.build(cfg, 3)
        # oracle: a linear model on the frozen features separates the set
        feats = extract_features(np.stack([s.image for s in data]), model)
        labels = np.array([s.label for s in data])
        oracle = LogisticRegression(C=100.0, max_iter=5000).fit(feats, labels)
        assert oracle.score(feats, labels) >= 0.95

        state = init_classifier((0, 1), 32, seed=4)
        enc, out, curve = train_base_session(model, state, data, TrainConfig(epochs=30, seed=5))
        assert evaluate(enc, out, data) >= 0.95
        assert curve[-1] < curve[0]
        per_epoch = len(curve) // 30
        assert np.mean(curve[-per_epoch:]) < np.mean(curve[:per_epoch])


class TestIncrementalSession:
    def _frozen(self):
        model = EncoderModel.build(SMALL, 0)
        FreezeSchedule(Phase.INCREMENTAL).apply(model)
        return model

    def _shots(self, rng, classes, k):
        return [LabeledSample(rng.standard_normal((3, 8, 8)), c) for c in classes for _ in range(k)]

    def test_five_way_five_shot(self, rng):
        model = self._frozen()
        state = ClassifierState(rng.standard_normal((3, 8)), (0, 1, 2), 16.0)
        before = model.digest()
        out = run_incremental_session(model, state, self._shots(rng, range(3, 8), 5))
        assert out.num_classes == 8 and out.class_ids[3:] == (3, 4, 5, 6, 7)
        assert model.digest() == before
        np.testing.assert_allclose(np.linalg.norm(out.weights[3:], axis=1), 1.0, atol=1e-9)

    def test_repeatable(self, rng):
        model = self._frozen()
        state = ClassifierState(rng.standard_normal((2, 8)), (0, 1), 16.0)
        shots = self._shots(rng, (5, 6), 3)
        a, b = run_incremental_session(model, state, shots), run_incremental_session(model, state, shots)
        assert a.weights.tobytes() == b.weights.tobytes() and a.class_ids == b.class_ids

    def test_one_shot(self, rng):
        model = self._frozen()
        state = ClassifierState(rng.standard_normal((1, 8)), (0,), 16.0)
        shots = self._shots(rng, (4,), 1)
        out = run_incremental_session(model, state, shots)
        z = extract_features(shots[0].image[None], model)[0]
        np.testing.assert_allclose(out.weights[1], z / np.linalg.norm(z), atol=1e-12)

    def test_overlap(self, rng):
        model = self._frozen()
        state = ClassifierState(rng.standard_normal((2, 8)), (0, 1), 16.0)
        with pytest.raises(ContractError):
            run_incremental_session(model, state, self._shots(rng, (1, 2), 2))

    def test_requires_frozen_encoder(self, rng):
        model = EncoderModel.build(SMALL, 0)
        FreezeSchedule(Phase.BASE).apply(model)
        state = ClassifierState(rng.standard_normal((1, 8)), (0,), 16.0)
        with pytest.raises(ContractError):
            run_incremental_session(model, state, self._shots(rng, (3,), 2))


def _small_plan(sessions, seed=0):
    ds = generate_synthetic_dataset(SyntheticParams(classes=6 + 2 * sessions, samples_per_class=10,
                                                    image_size=8, seed=seed))
    return build_session_plan(ds, 6, 2, 3, sessions, seed=seed)


def test_base_only_experiment():
    report = run_full_experiment(_small_plan(0), SMALL, TrainConfig(epochs=2))
    assert len(report.per_session_accuracy) == 1 and report.pd == 0


def test_experiment_freezes_encoder_after_base():
    result = run_experiment(_small_plan(3), SMALL, TrainConfig(epochs=2))
    assert len(result.report.per_session_accuracy) == 4
    assert result.classifier.num_classes == 12
    assert not any(t.requires_grad for _, t in result.encoder.named_parameters())
    np.testing.assert_allclose(np.linalg.norm(result.classifier.weights, axis=1), 1.0, atol=1e-9)


def test_single_precision_experiment():
    result = run_experiment(_small_plan(1), SMALL, TrainConfig(epochs=2, precision="single"))
    assert result.encoder.dtype == np.float32
    assert all(0.0 <= a <= 1.0 for a in result.report.per_session_accuracy)


def test_train_config_validation():
    for kwargs in (dict(epochs=-1), dict(batch_size=0), dict(momentum=1.0), dict(precision="half")):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)
